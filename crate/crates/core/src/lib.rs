pub mod autodiff;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experts;
pub mod gate;
pub mod graph;
pub mod model;
pub mod params;
pub mod prompt;
pub mod pcst;
pub mod rng;
pub mod subgraph;
pub mod synth;
pub mod tensor;
pub mod training;
