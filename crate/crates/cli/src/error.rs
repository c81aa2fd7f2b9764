//! Exit-code classification.

use fairwell::data::DataError;
use fairwell::encoders::EncoderError;
use fairwell::fairness::FairnessError;
use fairwell::training::TrainError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_DATA: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Precondition(String),
    #[error("another invocation holds {0}; remove it if no other run is active")]
    Locked(String),
}

/// Maps an error chain onto the documented exit codes.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) | CliError::Locked(_) => EXIT_USAGE,
                CliError::Precondition(_) => EXIT_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return train_code(e);
        }
        if let Some(e) = cause.downcast_ref::<DataError>() {
            return data_code(e);
        }
        if let Some(e) = cause.downcast_ref::<FairnessError>() {
            return fairness_code(e);
        }
        if let Some(e) = cause.downcast_ref::<EncoderError>() {
            return encoder_code(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_USAGE;
        }
    }
    EXIT_INTERNAL
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Config(_) => EXIT_USAGE,
        TrainError::Diverged { .. } => EXIT_NUMERIC,
        TrainError::Data(d) => data_code(d),
        TrainError::SingleClass(_) => EXIT_DATA,
        TrainError::Encoder(e) => encoder_code(e),
        TrainError::Loss(_) | TrainError::Graph(_) | TrainError::Probe(_) => EXIT_INTERNAL,
    }
}

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::Config(_) | DataError::Fractions(_) | DataError::Io(_) => EXIT_USAGE,
        DataError::Schema { .. }
        | DataError::Segments { .. }
        | DataError::DuplicateSubject(_)
        | DataError::MissingModality { .. }
        | DataError::EmptyCell { .. }
        | DataError::Sampler(_)
        | DataError::Json(_) => EXIT_DATA,
    }
}

fn fairness_code(e: &FairnessError) -> u8 {
    match e {
        FairnessError::Empty | FairnessError::GroupCount(_) | FairnessError::UnknownGroup(_) => EXIT_DATA,
        FairnessError::Row { .. } | FairnessError::Parse { .. } | FairnessError::Io(_) => EXIT_USAGE,
    }
}

fn encoder_code(e: &EncoderError) -> u8 {
    match e {
        EncoderError::Io(_) | EncoderError::Format(_) | EncoderError::Spec(_) | EncoderError::OutputDim(_) => EXIT_USAGE,
        EncoderError::EmptySegments { .. } | EncoderError::FeatureLength { .. } => EXIT_DATA,
        EncoderError::Tensor(_) => EXIT_INTERNAL,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn context_does_not_hide_the_code() {
        let e = Err::<(), _>(CliError::Precondition("x".into())).context("outer").unwrap_err();
        assert_eq!(exit_code(&e), EXIT_DATA);
        let e = Err::<(), _>(TrainError::Config("bad".into())).context("loading").unwrap_err();
        assert_eq!(exit_code(&e), EXIT_USAGE);
        let e = anyhow::Error::from(FairnessError::GroupCount(vec!["F".into()]));
        assert_eq!(exit_code(&e), EXIT_DATA);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), EXIT_INTERNAL);
    }
}
