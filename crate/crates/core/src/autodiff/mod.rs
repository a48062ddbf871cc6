//! Minimal reverse-mode automatic differentiation over dense `f64` tensors,
//! plus the Adam optimizer and a binary checkpoint format.

mod adam;
pub mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Central finite-difference gradient of `f` with respect to every scalar
/// of every parameter in `store`.
pub fn finite_difference<F>(store: &ParamStore, step: f64, mut f: F) -> crate::Result<Vec<Tensor>>
where
    F: FnMut(&ParamStore) -> crate::Result<f64>,
{
    let mut work = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let mut g = Tensor::zeros(store.get(id).shape());
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + step;
            let up = f(&work)?;
            work.get_mut(id).data_mut()[k] = orig - step;
            let down = f(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            g.data_mut()[k] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}
