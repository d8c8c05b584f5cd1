//! Named views over learnable scalars. Checkpointing, the optimizer and the
//! finite-difference checker all walk parameters through this trait, in a
//! fixed order.

use crate::tensor::Scalar;

pub struct ParamRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

pub trait Parameterized<T: Scalar> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>);

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>);

    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        self.collect_params_mut("", &mut out);
        out
    }

    /// Number of stored learnable scalars.
    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn push<'a, T>(
    out: &mut Vec<ParamRef<'a, T>>,
    prefix: &str,
    name: &str,
    shape: &[usize],
    data: &'a [T],
) {
    out.push(ParamRef {
        name: join(prefix, name),
        shape: shape.to_vec(),
        data,
    });
}

pub(crate) fn push_mut<'a, T>(
    out: &mut Vec<ParamMut<'a, T>>,
    prefix: &str,
    name: &str,
    shape: &[usize],
    data: &'a mut [T],
) {
    out.push(ParamMut {
        name: join(prefix, name),
        shape: shape.to_vec(),
        data,
    });
}
