//! BILLNET: a binarized Conv3D-LSTM for gesture recognition, with a float
//! reference path, a bit-packed logic-gate inference engine, staged
//! quantization-aware training and a BOP cost model.

pub mod autodiff;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod engine;
pub mod model;
pub mod quant;
pub mod refnet;
pub mod tensor;
pub mod train;
