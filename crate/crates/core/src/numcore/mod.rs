//! Dense tensors, a reverse-mode tape and the handful of differentiable ops
//! the segmentation model is built from.

mod graph;
mod kernels;
mod params;
mod tensor;

pub mod gradcheck;

pub use graph::{Border, Gradients, Graph, Var, KL_EPS};
pub use params::{ParamId, ParamStore};
pub use tensor::{Tensor, PDT1_MAGIC};


/// Bilinear resize of an `H×W×C` tensor outside any graph, using the same
/// half-pixel taps as [`Graph::upsample_bilinear`].
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> crate::Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || out_h == 0 || out_w == 0 {
        return Err(crate::Error::Shape(format!("resize {s:?} to {out_h}x{out_w}")));
    }
    let rows = kernels::resize_taps(s[0], out_h);
    let cols = kernels::resize_taps(s[1], out_w);
    let out = kernels::resize_forward(x.data(), (s[0], s[1], s[2]), &rows, &cols);
    Tensor::new(&[out_h, out_w, s[2]], out)
}
