pub mod conditions;
pub mod tokens;
pub mod toycodec;
pub mod model;
pub mod dataset;
pub mod evaluation;
pub mod settings;
pub mod training;
pub mod cli;
