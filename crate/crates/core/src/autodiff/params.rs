use ndarray::Array2;
use rand::Rng;

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Array2<f64>,
    /// Row pinned to zero (embedding padding row).
    zero_row: Option<usize>,
    decay: bool,
}

/// Named, ordered collection of trainable matrices.
///
/// Registration order is part of the checkpoint format, so modules must
/// register their parameters deterministically.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

/// Initialisation schemes used by the model modules.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    /// Zero-mean uniform with unit per-entry variance scaled by `1/sqrt(dim)`.
    Embedding(usize),
    Uniform(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(Entry {
            name,
            value,
            zero_row: None,
            decay: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn init<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let bound = match init {
            Init::Zeros => return self.add(name, Array2::zeros((rows, cols))),
            Init::Ones => return self.add(name, Array2::ones((rows, cols))),
            Init::FanIn(fan_in) => 1.0 / (fan_in.max(1) as f64).sqrt(),
            Init::Embedding(dim) => (3.0 / dim.max(1) as f64).sqrt(),
            Init::Uniform(bound) => bound,
        };
        let value = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound));
        self.add(name, value)
    }

    /// Pin `row` of `id` to zero; the optimiser re-zeroes it after every step.
    pub fn pin_zero_row(&mut self, id: ParamId, row: usize) {
        let entry = &mut self.entries[id.0];
        entry.value.row_mut(row).fill(0.0);
        entry.zero_row = Some(row);
    }

    pub fn zero_row(&self, id: ParamId) -> Option<usize> {
        self.entries[id.0].zero_row
    }

    /// Exclude a parameter from decoupled weight decay (norm gains, biases).
    pub fn no_decay(&mut self, id: ParamId) {
        self.entries[id.0].decay = false;
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Array2<f64>) {
        assert_eq!(self.entries[id.0].value.dim(), value.dim());
        self.entries[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.value.iter().all(|v| v.is_finite()))
    }

    /// L2 norm of every parameter, in registration order.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.iter().map(|v| v * v).sum::<f64>().sqrt()))
            .collect()
    }
}
