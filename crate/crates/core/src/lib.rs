//! Deep density models: invertible sigmoid decoders paired with encoders,
//! trained so that encoded data follows a product of Beta marginals, giving
//! exact normalized densities, sampling and entropy estimates.

pub mod beta;
pub mod classifier;
pub mod data;
pub mod density;
pub mod error;
pub mod network;
pub mod objective;
pub mod special;
pub mod trainer;

pub use beta::{moment_match, sym_kl, BetaParams, TargetSchedule};
pub use classifier::{
    load_classifier, save_classifier, train_class_models, Classification, ClassifierBundle,
    ClassifierConfig, Decision,
};
pub use data::{
    load_csv, load_idx, load_model, save_model, CsvOptions, Dataset, PreprocessOptions,
    Preprocessor,
};
pub use density::{
    bernoulli_check, entropy_report, floored_mean, marginal_fit_report, DensitySummary,
    DimensionFit, EntropyReport, LogDensity, ModelBundle,
};
pub use error::{Error, FitLocation, Result};
pub use network::{condition_penalty, Decoder, Encoder, Layer};
pub use objective::{ObjectiveReport, PenaltyWeights};
pub use trainer::{
    train, ArmijoConfig, Block, EpochRecord, ForeignConfig, TrainConfig, TrainState, WeightRatios,
};
