//! Hot patching pipeline: unified diffs are analysed against a C subset,
//! classified, turned into aspect-based dynamic patches, compiled into
//! bundles and woven into running simulated processes, locally or across
//! a fleet of agents.

pub mod aspectdsl;
pub mod canon;
pub mod classifier;
pub mod csubset;
pub mod diffcore;
pub mod fleet;
pub mod pipeline;
pub mod targetvm;
pub mod weaver;
