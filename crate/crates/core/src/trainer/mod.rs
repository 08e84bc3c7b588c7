//! Joint training loop over detection, grounding, image-text and
//! classification batches.

mod config;
mod optim;
mod run;
mod step;

pub use config::{
    DataSection, EvalSection, GroupSection, LossSection, TrainConfig, TrainSection, WraSection, SEED_ENV,
};
pub use optim::{AdamW, LrSchedule};
pub use run::{
    fit_triplet, load_trained, resume, train, Corpora, TrainOutcome, Trainer, LAST_CHECKPOINT, METRICS_FILE,
    TIMING_FILE,
};
pub use step::{
    build_step, step_loss, StepGraph, StepReport, TERM_ALIGN, TERM_CENTER, TERM_CLS, TERM_CTS, TERM_REG,
};

#[cfg(test)]
mod tests;
