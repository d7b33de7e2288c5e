use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("duplicate function `{name}`")]
    DuplicateFunction { name: String },
    #[error("function `{name}` has no blocks")]
    EmptyFunction { name: String },
    #[error("duplicate label `{label}` in function `{function}`")]
    DuplicateLabel { function: String, label: String },
    #[error("functions `{first}` and `{second}` overlap")]
    OverlappingFunctions { first: String, second: String },
    #[error("dangling target `{target}` in {function}/{block}")]
    DanglingTarget {
        function: String,
        block: String,
        target: String,
    },
    #[error("invalid block {function}/{block}: {reason}")]
    InvalidBlock {
        function: String,
        block: String,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProfileError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("edge {function}/{src}->{dst} is not in the CFG")]
    UnknownEdge {
        function: String,
        src: String,
        dst: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PassError {
    #[error("unknown block reordering algorithm `{0}`")]
    UnknownAlgorithm(String),
    #[error("unknown option value `{value}` for `{option}`")]
    BadOption { option: String, value: String },
    #[error("call site {function}/{block}#{index} not found")]
    SiteNotFound {
        function: String,
        block: String,
        index: usize,
    },
    #[error("block {function}/{block} has a conditional branch but no fall-through successor")]
    MissingFallThrough { function: String, block: String },
    #[error("unreachable block {function}/{block} carries profile count {count}")]
    ProfiledBlockUnreachable {
        function: String,
        block: String,
        count: u64,
    },
    #[error("hot range [{hot_start:#x}, {hot_end:#x}) overlaps cold range [{cold_start:#x}, {cold_end:#x})")]
    SectionOverlap {
        hot_start: u64,
        hot_end: u64,
        cold_start: u64,
        cold_end: u64,
    },
    #[error("invalid block order for `{function}`: {reason}")]
    BadOrder { function: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("block {function}/{block} is missing from the layout plan")]
    MissingBlock { function: String, block: String },
    #[error("invalid cache configuration: {0}")]
    BadCacheConfig(String),
}
