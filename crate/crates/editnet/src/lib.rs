pub mod actions;
pub mod checkpoint;
pub mod engine;
pub mod model;
pub mod tensor;
pub mod training;
