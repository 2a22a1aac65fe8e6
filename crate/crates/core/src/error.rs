use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid tensor shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable {0} does not belong to this tape")]
    DetachedVar(usize),
    #[error("gradient refers to parameter {0} that is not held by this store")]
    DetachedParameter(String),
    #[error("index {index} out of range for extent {extent} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("loss function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token {token} outside vocabulary of size {vocab}")]
    OutOfVocab { token: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("option scoring needs at least two options, got {0}")]
    TooFewOptions(usize),
    #[error("option {0} is empty")]
    EmptyOption(usize),

    #[error("adapter variant mismatch: expected {expected}, found {found}")]
    VariantMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("adapter is missing its {0}")]
    MissingBlock(&'static str),
    #[error("gate arity {found} does not match expected {expected}")]
    GateArity { expected: usize, found: usize },
    #[error("invalid adapter config: {0}")]
    InvalidAdapter(String),
    #[error("slot {0} has no gate")]
    NoGate(String),
    #[error("expert {index} is incompatible: {reason}")]
    IncompatibleExpert { index: usize, reason: String },

    #[error("unknown discipline `{0}`")]
    UnknownDiscipline(String),
    #[error("discipline `{0}` has no samples eligible for unique upsampling")]
    NoEligibleSamples(String),
    #[error("target size {target} below current size {current} for `{discipline}`")]
    TargetTooSmall {
        discipline: String,
        target: usize,
        current: usize,
    },
    #[error("fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("subset would leave discipline `{0}` empty")]
    EmptyDiscipline(String),
    #[error("percent {0} outside 0..=100")]
    InvalidPercent(u32),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("no n-grams available")]
    NoNgrams,
    #[error("marker token `{0}` is claimed by more than one discipline")]
    MarkerCollision(String),
    #[error("vocabulary overflow: {needed} tokens needed, limit {limit}")]
    VocabOverflow { needed: usize, limit: usize },
    #[error("invalid sample `{id}`: {reason}")]
    InvalidSample { id: String, reason: String },
    #[error("invalid data spec: {0}")]
    InvalidDataSpec(String),

    #[error("total_steps must be positive")]
    ZeroSteps,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),
    #[error("discipline `{discipline}` run failed: {reason}")]
    DisciplineRun { discipline: String, reason: String },

    #[error("sample `{0}` has no options")]
    MissingOptions(String),
    #[error("vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("baseline accuracy for entry {0} is zero")]
    ZeroBaseline(usize),
    #[error("need at least two reports, got {0}")]
    TooFewReports(usize),
    #[error("reports cover different disciplines")]
    DisciplineMismatch,
}
