//! Graph-structured cross-view geo-localisation at desk scale.
//!
//! Cities are road graphs whose junctions carry streetview and satellite
//! features. Walks through the graph are embedded by a two-branch
//! message-passing network trained with a triplet objective; streetview query
//! walks are localised by nearest-neighbour search over satellite reference
//! walks, optionally filtered by the road layout at each junction.

pub mod bvm;
pub mod evalbench;
pub mod geograph;
pub mod gnnembed;
pub mod retrieval;
pub mod seed;
pub mod synthfeat;
pub mod walker;
