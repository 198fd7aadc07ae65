use super::{Float, SeededRng, Tensor};

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub requires_grad: bool,
}

/// Ordered parameter collection. Declaration order is the serialization
/// order used by checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<F>) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            requires_grad: true,
        });
        self.params.len() - 1
    }

    /// Glorot-uniform matrix: `U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn push_xavier(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut SeededRng) -> usize {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform_range(-a, a)).collect();
        self.push(name, Tensor::from_f64(&[rows, cols], &data).unwrap())
    }

    pub fn push_normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut SeededRng,
    ) -> usize {
        let data: Vec<f64> = (0..rows * cols).map(|_| std * rng.normal()).collect();
        self.push(name, Tensor::from_f64(&[rows, cols], &data).unwrap())
    }

    pub fn push_const(&mut self, name: impl Into<String>, len: usize, value: f64) -> usize {
        self.push(name, Tensor::full(&[len], F::from_f64_lossy(value)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param<F> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param<F> {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    requires_grad: p.requires_grad,
                })
                .collect(),
        }
    }
}
