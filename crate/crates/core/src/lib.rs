pub mod episodes;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train_eval;
