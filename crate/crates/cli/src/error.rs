use std::fmt;

use pvdisagg::eval::EvalError;
use pvdisagg::methods::MethodError;
use pvdisagg::optim::OptimError;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Input,
    NoConvergence,
    Invariant,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Input => 2,
            Kind::NoConvergence => 3,
            Kind::Invariant => 4,
        }
    }
}

/// An error tagged with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub source: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.source)
    }
}

impl std::error::Error for Failure {}

impl Failure {
    pub fn new(kind: Kind, source: impl Into<anyhow::Error>) -> anyhow::Error {
        anyhow::Error::new(Failure {
            kind,
            source: source.into(),
        })
    }

    pub fn input(source: impl Into<anyhow::Error>) -> anyhow::Error {
        Self::new(Kind::Input, source)
    }

    pub fn input_msg(msg: impl Into<String>) -> anyhow::Error {
        Self::new(Kind::Input, anyhow::anyhow!(msg.into()))
    }

    /// Solver errors keep their own class; everything else is an input error.
    pub fn from_method(e: MethodError) -> anyhow::Error {
        let kind = match &e {
            MethodError::Optim(o) => optim_kind(o),
            _ => Kind::Input,
        };
        Self::new(kind, e)
    }

    pub fn from_eval(e: EvalError) -> anyhow::Error {
        match e {
            EvalError::Method(m) => Self::from_method(m),
            other => Self::input(other),
        }
    }
}

fn optim_kind(e: &OptimError) -> Kind {
    match e {
        OptimError::NoConvergence { .. } => Kind::NoConvergence,
        OptimError::Invariant(_) => Kind::Invariant,
        _ => Kind::Input,
    }
}

/// Kind of the first tagged error in the chain; untagged errors count as
/// internal.
pub fn kind_of(err: &anyhow::Error) -> Kind {
    err.chain()
        .find_map(|e| e.downcast_ref::<Failure>().map(|f| f.kind))
        .unwrap_or(Kind::Invariant)
}

#[derive(Serialize)]
pub struct ErrorRecord<'a> {
    pub tool: &'a str,
    pub version: &'a str,
    pub exit_code: u8,
    pub kind: Kind,
    pub message: String,
}
