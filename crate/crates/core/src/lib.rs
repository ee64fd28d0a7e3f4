pub mod lossmetrics;
pub mod model;
pub mod phantom;
pub mod postprocess;
pub mod preprocess;
pub mod tensor;
pub mod training;
pub mod volumeio;
