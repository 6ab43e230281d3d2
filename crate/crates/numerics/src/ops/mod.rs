mod conv;
mod elementwise;
mod linalg;
mod norm;
mod shape;
mod softmax;

pub use conv::Conv2dSpec;
pub use elementwise::GeluKind;
pub use norm::{BatchStats, RunningStats, NORM_EPS};
pub use softmax::softmax_slice;
