use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use repeatnet::data::{
    self, load_prepared, save_prepared, split_sessions, split_stats, synthesize, write_csv, DatasetSplit, FilterConfig,
    Session, SplitBy, SplitRatio, SynthConfig, Vocabulary,
};
use repeatnet::eval::{evaluate, rank, MetricReport, Pop, SPop};
use repeatnet::model::ModelParams;
use repeatnet::training::{self, Checkpoint, Dtype, TrainConfig};

use crate::{
    Breakdown, EvalArgs, Failure, PrepareArgs, RecommendArgs, SplitByArg, SplitName, StatsArgs, SynthArgs, TrainArgs,
};

type Result = std::result::Result<(), Failure>;

/// Resolved settings written beside a command's outputs.
fn write_run_config(path: &Path, command: &str, pairs: &[(&str, String)]) -> Result {
    let mut text = format!("command={command}\n");
    for (k, v) in pairs {
        text.push_str(&format!("{k}={v}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

/// `dir/name.run_config.txt` for a file output.
fn sidecar(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".run_config.txt");
    output.with_file_name(name)
}

fn print_stats(split: &DatasetSplit) {
    let clicks: usize = split.splits().iter().flat_map(|(_, s)| s.iter()).map(Session::len).sum();
    println!("items={}", split.vocabulary.len());
    println!("clicks={clicks}");
    for s in split_stats(split) {
        let ratio = s.repeat_ratio.map_or("nan".into(), |r| format!("{:.2}", r * 100.0));
        println!(
            "split={} sessions={} examples={} repeat_ratio_pct={}",
            s.name, s.sessions, s.examples, ratio
        );
    }
}

pub fn prepare(a: PrepareArgs) -> Result {
    let ratio: SplitRatio = a
        .split
        .parse()
        .map_err(|e| Failure::Usage(format!("--split: {e}")))?;
    let filter = FilterConfig {
        min_item_count: a.min_item_count,
        min_session_len: a.min_session_len,
        max_session_len: a.max_session_len,
    };
    let (sessions, vocab) =
        data::ingest(&a.input, &filter).map_err(|e| Failure::Data(format!("--input {}: {e}", a.input.display())))?;
    let by = match a.split_by {
        SplitByArg::Chronological => SplitBy::Chronological,
        SplitByArg::Random => SplitBy::Random { seed: a.seed },
    };
    let split = split_sessions(sessions, vocab, ratio, by);
    save_prepared(&split, &a.output)?;
    print_stats(&split);
    write_run_config(
        &sidecar(&a.output),
        "prepare",
        &[
            ("input", a.input.display().to_string()),
            ("output", a.output.display().to_string()),
            ("min-item-count", a.min_item_count.to_string()),
            ("min-session-len", a.min_session_len.to_string()),
            ("max-session-len", a.max_session_len.map_or("none".into(), |m| m.to_string())),
            ("split", ratio.to_string()),
            (
                "split-by",
                match by {
                    SplitBy::Chronological => "chronological".into(),
                    SplitBy::Random { .. } => "random".into(),
                },
            ),
            ("seed", a.seed.to_string()),
        ],
    )
}

pub fn synth(a: SynthArgs) -> Result {
    let cfg = SynthConfig {
        num_items: a.items,
        num_sessions: a.sessions,
        min_len: a.min_len,
        max_len: a.max_len,
        repeat_prob: a.repeat_prob,
        zipf_exponent: a.zipf,
        seed: a.seed,
    };
    let sessions = synthesize(&cfg).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut vocab = Vocabulary::new();
    for i in 0..a.items {
        vocab.insert(&format!("i{i}"));
    }
    let file = File::create(&a.output)?;
    write_csv(&sessions, &vocab, BufWriter::new(file))?;
    write_run_config(
        &sidecar(&a.output),
        "synth",
        &[
            ("items", a.items.to_string()),
            ("sessions", a.sessions.to_string()),
            ("min-len", a.min_len.to_string()),
            ("max-len", a.max_len.to_string()),
            ("repeat-prob", a.repeat_prob.to_string()),
            ("zipf", a.zipf.to_string()),
            ("seed", a.seed.to_string()),
            ("output", a.output.display().to_string()),
        ],
    )
}

pub fn stats(a: StatsArgs) -> Result {
    let split = load_prepared(&a.data).map_err(|e| Failure::Data(format!("--data {}: {e}", a.data.display())))?;
    print_stats(&split);
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("--config {}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| Failure::Usage(format!("--config {}: {e}", path.display())))?;
    }
    let flags: [(&str, Option<String>); 14] = [
        ("lr", a.lr.map(|v| v.to_string())),
        ("beta1", a.beta1.map(|v| v.to_string())),
        ("beta2", a.beta2.map(|v| v.to_string())),
        ("epsilon", a.epsilon.map(|v| v.to_string())),
        ("clip", a.clip.map(|v| v.to_string())),
        ("batch-size", a.batch_size.map(|v| v.to_string())),
        ("dropout", a.dropout.map(|v| v.to_string())),
        ("lr-halve-every", a.lr_halve_every.map(|v| v.to_string())),
        ("max-epochs", a.max_epochs.map(|v| v.to_string())),
        ("joint-mode-loss", a.joint_mode_loss.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("ablation", a.ablation.map(|v| v.to_string())),
        ("emb-size", a.emb_size.map(|v| v.to_string())),
        ("hidden-size", a.hidden_size.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v).map_err(|e| Failure::Usage(format!("--{k}: {e}")))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_for(params: ModelParams, split: &DatasetSplit, cfg: &TrainConfig, epoch: usize) -> Checkpoint {
    let mut c = Checkpoint::new(params);
    c.vocabulary = Some(split.vocabulary.clone());
    for (k, v) in cfg.pairs() {
        c.meta.insert(format!("train.{k}"), v);
    }
    c.meta.insert("epoch".into(), epoch.to_string());
    c
}

pub fn train(a: TrainArgs) -> Result {
    let cfg = resolve_train_config(&a)?;
    let split = load_prepared(&a.data).map_err(|e| Failure::Data(format!("--data {}: {e}", a.data.display())))?;
    fs::create_dir_all(&a.output)?;
    let mut pairs: Vec<(&str, String)> = vec![
        ("data", a.data.display().to_string()),
        ("output", a.output.display().to_string()),
    ];
    pairs.extend(cfg.pairs());
    write_run_config(&a.output.join("run_config.txt"), "train", &pairs)?;

    let mut log = BufWriter::new(File::create(a.output.join("train_log.ndjson"))?);
    let mut io_err = None;
    let outcome = training::train(&split, &cfg, |r| {
        let line = serde_json::to_string(r).expect("record serializes");
        eprintln!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    log.flush()?;
    if let Some(e) = io_err {
        return Err(e.into());
    }

    let last_epoch = outcome.log.len();
    let mut last = checkpoint_for(outcome.last, &split, &cfg, last_epoch);
    last.adam = Some(outcome.adam);
    last.save(a.output.join("last.ckpt"), Dtype::F64)?;
    checkpoint_for(outcome.best, &split, &cfg, outcome.best_epoch).save(a.output.join("best.ckpt"), Dtype::F64)?;
    println!("best_epoch={}", outcome.best_epoch);
    println!("checkpoint={}", a.output.join("best.ckpt").display());
    Ok(())
}

/// Re-indexes sessions from one vocabulary into another, dropping items the
/// target does not know. Returns the number of dropped clicks.
fn remap(sessions: &[Session], from: &Vocabulary, to: &Vocabulary) -> (Vec<Session>, usize) {
    let mut dropped = 0;
    let out = sessions
        .iter()
        .map(|s| {
            let ids = s.items.iter().map(|&i| from.id_of(i).expect("validated dataset"));
            let (items, unknown) = to.encode_lossy(ids);
            dropped += unknown.len();
            Session::new(s.id.clone(), items)
        })
        .collect();
    (out, dropped)
}

pub fn eval(a: EvalArgs) -> Result {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let split = load_prepared(&a.data).map_err(|e| Failure::Data(format!("--data {}: {e}", a.data.display())))?;
    let mut params = ckpt.params;
    if let Some(ab) = a.ablation {
        params.config.ablation = ab;
    }
    let label = params.config.ablation.to_string();
    let (split_name, sessions) = match a.split {
        SplitName::Train => ("train", &split.train),
        SplitName::Validation => ("validation", &split.validation),
        SplitName::Test => ("test", &split.test),
    };

    let model_vocab = ckpt.vocabulary.as_ref().ok_or_else(|| {
        Failure::Data("--checkpoint: no vocabulary stored; cannot align it with --data".into())
    })?;
    let (sessions, train_sessions) = if model_vocab.fingerprint() == split.vocabulary.fingerprint() {
        (sessions.clone(), split.train.clone())
    } else {
        let (s, dropped) = remap(sessions, &split.vocabulary, model_vocab);
        eprintln!("warning: dropped {dropped} clicks whose items the checkpoint does not know");
        (s, remap(&split.train, &split.vocabulary, model_vocab).0)
    };
    let examples = data::unroll(&sessions);
    if examples.is_empty() {
        return Err(Failure::Data(format!("--data: the {split_name} split has no prefix-target examples")));
    }

    let breakdown = a.breakdown.is_some_and(|b| matches!(b, Breakdown::Repeat));
    let mut reports: Vec<(String, MetricReport)> = vec![(label, evaluate(&params, &examples, &a.k, breakdown)?)];
    if a.baselines {
        let n = params.config.num_items;
        reports.push(("pop".into(), evaluate(&Pop::from_sessions(&train_sessions, n), &examples, &a.k, breakdown)?));
        reports.push(("s-pop".into(), evaluate(&SPop::from_sessions(&train_sessions, n), &examples, &a.k, breakdown)?));
    }

    for (model, r) in &reports {
        print!("{}", r.to_text(split_name, model));
    }
    if let Some(path) = &a.report {
        let mut out = BufWriter::new(File::create(path)?);
        for (model, r) in &reports {
            for rec in r.records(split_name, model) {
                writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
            }
        }
        out.flush()?;
    }
    Ok(())
}

pub fn recommend(a: RecommendArgs) -> Result {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let vocab = ckpt
        .vocabulary
        .as_ref()
        .ok_or_else(|| Failure::Data("--checkpoint: no vocabulary stored".into()))?;
    let ids = a.session.split(',').map(str::trim).filter(|s| !s.is_empty());
    let (prefix, unknown) = vocab.encode_lossy(ids);
    if !unknown.is_empty() {
        eprintln!("warning: dropped unknown items: {}", unknown.join(","));
    }
    if prefix.is_empty() {
        return Err(Failure::Usage("--session: no known items left".into()));
    }
    if a.top == 0 {
        return Err(Failure::Usage("--top must be at least 1".into()));
    }
    let pred = ckpt.params.predict(&prefix)?;
    println!("p_repeat={:.6} p_explore={:.6}", pred.p_repeat, pred.p_explore);
    for (pos, i) in rank(&pred.final_dist, a.top).into_iter().enumerate() {
        let tag = if prefix.contains(&i) { "repeat" } else { "explore" };
        println!(
            "{}\t{}\t{:.6}\t{}",
            pos + 1,
            vocab.id_of(i).expect("index in vocabulary"),
            pred.final_dist[i],
            tag
        );
    }
    Ok(())
}
