//! Light k-order graph convolution and pooling for graph classification,
//! with a neighborhood information-gain analysis that picks the convolution
//! order from data.

pub mod autodiff;
pub mod graph;
pub mod kinfo;
pub mod nn;
pub mod spectral;
pub mod train;
pub mod verify;
