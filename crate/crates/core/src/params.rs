//! Named tensor collections shared by the optimizer, gradient checker and
//! checkpoint format.

/// A collection of named, fixed-shape `f64` tensors stored contiguously.
///
/// Visiting order is part of the contract: it must be identical for every
/// value of the implementing type with the same shapes.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, data| n += data.len());
        n
    }

    /// `(name, shape)` of every tensor in visiting order.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, shape, _| out.push((name.to_string(), shape.to_vec())));
        out
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        self.visit(&mut |_, _, data| out.extend_from_slice(data));
        out
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, data| ok &= data.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Plain list of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NamedTensors {
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensors {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data does not fill its shape");
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape,
            data,
        });
    }

    /// Copies every tensor of `params`.
    pub fn snapshot(params: &impl Parameters) -> Self {
        let mut out = NamedTensors::default();
        params.visit(&mut |name, shape, data| out.push(name, shape.to_vec(), data.to_vec()));
        out
    }

    /// Zero tensors with the layout of `params`.
    pub fn zeros_like(params: &impl Parameters) -> Self {
        let mut out = NamedTensors::default();
        params.visit(&mut |name, shape, data| out.push(name, shape.to_vec(), vec![0.0; data.len()]));
        out
    }
}

impl Parameters for NamedTensors {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for t in &self.tensors {
            f(&t.name, &t.shape, &t.data);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for t in &mut self.tensors {
            f(&t.name, &t.shape, &mut t.data);
        }
    }
}
