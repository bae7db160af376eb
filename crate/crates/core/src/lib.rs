mod binio;
pub mod data;
pub mod decoders;
pub mod encoder;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod training;
