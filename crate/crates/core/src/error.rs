use thiserror::Error;

use crate::world::CarId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown car id {0}")]
    UnknownCar(CarId),

    #[error("geometry error: {0}")]
    Geometry(String),

    /// IDM evaluated at a non-positive gap.
    #[error("car {follower} has non-positive gap {gap} m to its leader")]
    Collision { follower: CarId, gap: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A barrier whose ladder never reaches a robot control.
    #[error("barrier `{0}` has no reachable robot control")]
    Unreachable(String),

    #[error("barrier `{name}`: {reason}")]
    Assembly { name: String, reason: String },

    #[error("{0}")]
    Fault(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
