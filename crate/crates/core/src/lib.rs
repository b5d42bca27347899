pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod recurrent;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;
