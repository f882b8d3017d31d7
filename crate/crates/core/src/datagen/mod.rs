//! Dataset generation for both case studies, plus serialization.

pub mod io;
pub mod pendulum;
pub mod pk;

pub use io::{
    load_encoder_dataset, load_pendulum_dataset, load_pk_dataset, save_encoder_dataset,
    save_pendulum_dataset, save_pk_dataset, FileFormat,
};
pub use pendulum::{
    gen_encoder_pretraining_data, gen_pendulum_counterfactuals, gen_pendulum_dataset, BetaRanges,
    CounterfactualRecord, EncoderDataset, LabeledRecord, PendulumDataset, PendulumRecord,
    PendulumSampleSpec, TauDistribution, COUNTERFACTUAL_TAUS, PREFIX_TAU,
};
pub use pk::{
    assign_splits, gen_pk_cohort_synthetic, gen_pk_dataset, label_optimal_dose, read_cohort_csv,
    CandidateOutcome, DoseDecision, DoseProtocol, PkDataset, PkRecord, SplitGroup, OOD_AGE,
    OOD_BMI,
};
