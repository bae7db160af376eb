use std::path::Path;

use crate::binio::{ByteReader, ByteWriter, Eof};

use super::{DataError, DatasetSplit, Result, Session, Vocabulary};

pub const PREPARED_MAGIC: &[u8; 8] = b"RPNDATA1";
const VERSION: u32 = 1;

impl From<Eof> for DataError {
    fn from(_: Eof) -> Self {
        DataError::Truncated
    }
}

/// Serializes a split: magic, version, vocabulary (id, frequency), then the
/// three session lists with index-encoded items.
pub fn write_prepared(split: &DatasetSplit) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(PREPARED_MAGIC);
    w.u32(VERSION);
    let vocab = &split.vocabulary;
    w.u64(vocab.len() as u64);
    for (id, &freq) in vocab.ids().iter().zip(vocab.frequencies()) {
        w.str32(id);
        w.u64(freq);
    }
    for (_, sessions) in split.splits() {
        w.u64(sessions.len() as u64);
        for s in sessions {
            w.str32(&s.id);
            w.u32(s.items.len() as u32);
            for &i in &s.items {
                w.u32(i as u32);
            }
            match &s.timestamps {
                Some(ts) => {
                    w.u8(1);
                    ts.iter().for_each(|&t| w.i64(t));
                }
                None => w.u8(0),
            }
        }
    }
    w.buf
}

pub fn read_prepared(bytes: &[u8]) -> Result<DatasetSplit> {
    let mut r = ByteReader::new(bytes);
    if r.take(8).map_err(|_| DataError::BadMagic)? != PREPARED_MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DataError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let mut vocabulary = Vocabulary::new();
    let n = r.u64()? as usize;
    for _ in 0..n {
        let id = r.str32()?;
        let freq = r.u64()?;
        let i = vocabulary.insert(&id);
        if i + 1 != vocabulary.len() {
            return Err(DataError::Contract(format!("duplicate vocabulary id `{id}`")));
        }
        vocabulary.set_frequency(i, freq);
    }
    let read_sessions = |r: &mut ByteReader<'_>| -> Result<Vec<Session>> {
        let count = r.u64()? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id = r.str32()?;
            let len = r.u32()? as usize;
            let items = (0..len).map(|_| r.u32().map(|i| i as usize)).collect::<std::result::Result<_, _>>()?;
            let timestamps = match r.u8()? {
                0 => None,
                _ => Some((0..len).map(|_| r.i64()).collect::<std::result::Result<_, _>>()?),
            };
            out.push(Session { id, items, timestamps });
        }
        Ok(out)
    };
    let train = read_sessions(&mut r)?;
    let validation = read_sessions(&mut r)?;
    let test = read_sessions(&mut r)?;
    if r.remaining() != 0 {
        return Err(DataError::Contract(format!("{} trailing bytes after dataset", r.remaining())));
    }
    let split = DatasetSplit {
        train,
        validation,
        test,
        vocabulary,
    };
    split.validate()?;
    Ok(split)
}

pub fn save_prepared(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_prepared(split))?;
    Ok(())
}

pub fn load_prepared(path: impl AsRef<Path>) -> Result<DatasetSplit> {
    read_prepared(&std::fs::read(path)?)
}
