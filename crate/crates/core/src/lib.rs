pub mod apps;
pub mod augment;
pub mod autodiff;
pub mod motion;
pub mod synth;
pub mod tan;
pub mod train;
pub mod lexicon;
pub mod metrics;
pub mod pipeline;
