//! A small neural-network engine built for reproducibility.
//!
//! Everything runs in `f64` on a single thread with fixed iteration
//! orders, so a seeded run produces bit-identical parameters anywhere.
//! Two detector families are supported: a convolutional model that reads
//! the whole flow matrix at once, and a recurrent model that emits one
//! verdict per packet row. Both end in a two-way softmax and train with
//! exact analytic gradients; [`check`] provides the finite-difference
//! oracle used to verify them.

pub mod check;
pub mod checkpoint;
pub mod fit;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod run;
pub mod tensor;

pub use checkpoint::{load_model, read_model, save_model, write_model};
pub use fit::{fit, objective_value, Drift, EpochStats, FitConfig, Penalties};
pub use loss::{
    add_logit_grads, cross_entropy, distillation, group_l1, group_l2, importance_drift,
    DriftForm, LogitGrads,
};
pub use metrics::{binary_label, evaluate, evaluate_inputs, input_for, Metrics};
pub use model::{
    build_cnn_model, build_lstm_model, Architecture, InputSpec, LayerSpec, NetworkModel,
    ParamBlock, CONV_KERNEL, DEFAULT_DROPOUT, N_CLASSES,
};
pub use optim::{Sgd, TrainMask};
pub use run::{backward, forward, infer, softmax2, BatchOutput, LstmStream, Mode, Trace};
pub use tensor::{ModelInput, Tensor};
