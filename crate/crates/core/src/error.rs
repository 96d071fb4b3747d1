use thiserror::Error;

use crate::audio_io::AudioError;
use crate::augment::AugmentError;
use crate::dataset::DatasetError;
use crate::eq_model::GmmError;
use crate::fir_design::FirError;
use crate::room_sim::RoomError;
use crate::spectral::SpectralError;

pub type Result<T> = std::result::Result<T, Error>;

/// Umbrella error for the pipeline stages that chain several modules.
#[derive(Error, Debug)]
pub enum Error {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error(transparent)]
    Fir(#[from] FirError),
    #[error(transparent)]
    Room(#[from] RoomError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Batch(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
