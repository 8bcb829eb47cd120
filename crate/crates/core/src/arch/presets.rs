//! Teacher architectures shipped with the crate.

use super::{Architecture, Block, LayerSpec, Shape};

/// ~103k-parameter convolutional MNIST teacher used for desk-scale runs.
pub fn mnist_conv_teacher() -> Architecture {
    Architecture::new(
        vec![
            LayerSpec::conv(8, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2),
            LayerSpec::conv(16, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2),
            LayerSpec::flatten(),
            LayerSpec::linear(128),
            LayerSpec::relu(),
            LayerSpec::linear(10),
        ],
        Shape::new(1, 28, 28),
        10,
        vec![],
    )
    .expect("static teacher")
}

/// Eight-layer teacher used with the surrogate evaluator.
pub fn surrogate_teacher_a() -> Architecture {
    Architecture::new(
        vec![
            LayerSpec::conv(16, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2),
            LayerSpec::conv(32, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2),
            LayerSpec::linear(64),
            LayerSpec::linear(10),
        ],
        Shape::new(1, 28, 28),
        10,
        vec![],
    )
    .expect("static teacher")
}

/// A deeper, wider relative of [`surrogate_teacher_a`] for transfer runs.
pub fn surrogate_teacher_b() -> Architecture {
    Architecture::new(
        vec![
            LayerSpec::conv(16, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2),
            LayerSpec::conv(32, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2),
            LayerSpec::conv(64, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::linear(128),
            LayerSpec::linear(10),
        ],
        Shape::new(1, 28, 28),
        10,
        vec![],
    )
    .expect("static teacher")
}

/// Small network with one residual block (layers 2..=5).
pub fn residual_teacher() -> Architecture {
    Architecture::new(
        vec![
            LayerSpec::conv(8, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::conv(8, 3, 1, 1),
            LayerSpec::batch_norm(),
            LayerSpec::relu(),
            LayerSpec::conv(8, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2),
            LayerSpec::flatten(),
            LayerSpec::linear(10),
        ],
        Shape::new(1, 16, 16),
        10,
        vec![Block { start: 2, end: 5 }],
    )
    .expect("static teacher")
}

pub fn by_name(name: &str) -> Option<Architecture> {
    match name {
        "mnist-conv" => Some(mnist_conv_teacher()),
        "surrogate-a" => Some(surrogate_teacher_a()),
        "surrogate-b" => Some(surrogate_teacher_b()),
        "residual" => Some(residual_teacher()),
        _ => None,
    }
}

pub const NAMES: [&str; 4] = ["mnist-conv", "surrogate-a", "surrogate-b", "residual"];

pub fn all() -> Vec<Architecture> {
    NAMES.iter().filter_map(|n| by_name(n)).collect()
}
