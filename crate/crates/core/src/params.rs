//! Uniform traversal over named parameter tensors.

/// A collection of named `f64` tensors visited in a fixed order.
///
/// The visiting order defines the flattened layout used by the optimizer,
/// the gradient checker and the checkpoint writer.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, d| n += d.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, d| out.extend_from_slice(d));
        out
    }

    /// Overwrites every tensor from `flat`. Panics if the length is wrong.
    fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |_, d| {
            let n = d.len();
            d.copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(off, flat.len(), "unflatten length mismatch");
    }

    /// `self += s * other` over the flattened layout.
    fn axpy_flat(&mut self, s: f64, other: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |_, d| {
            let n = d.len();
            for (a, b) in d.iter_mut().zip(&other[off..off + n]) {
                *a += s * b;
            }
            off += n;
        });
    }

    fn scale_all(&mut self, s: f64) {
        self.visit_mut(&mut |_, d| d.iter_mut().for_each(|x| *x *= s));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, d| ok &= d.iter().all(|x| x.is_finite()));
        ok
    }
}
