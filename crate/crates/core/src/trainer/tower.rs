//! Embedding-lookup towers with an optional affine head.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Lazily grown id -> vector table. Rows are initialized from a hash of
/// `(seed, salt, id)`, so a row's initial value never depends on the order in
/// which ids show up.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    seed: u64,
    salt: u64,
    scale: f64,
    ids: Vec<u64>,
    values: Vec<f64>,
    index: HashMap<u64, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, seed: u64, salt: u64, scale: f64) -> Self {
        Self {
            dim,
            seed,
            salt,
            scale,
            ids: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn lookup(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn get_or_init(&mut self, id: u64) -> usize {
        if let Some(&i) = self.index.get(&id) {
            return i;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.seed ^ mix64(self.salt ^ mix64(id))));
        for _ in 0..self.dim {
            self.values.push(rng.random_range(-self.scale..self.scale));
        }
        self.ids.push(id);
        self.index.insert(id, self.ids.len() - 1);
        self.ids.len() - 1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn seed_parts(&self) -> (u64, u64, f64) {
        (self.seed, self.salt, self.scale)
    }

    pub(crate) fn from_parts(
        dim: usize,
        (seed, salt, scale): (u64, u64, f64),
        ids: Vec<u64>,
        values: Vec<f64>,
    ) -> Self {
        let index = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        Self {
            dim,
            seed,
            salt,
            scale,
            ids,
            values,
            index,
        }
    }
}

/// `y = W x + b` with `W` stored row-major, initialized to the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self {
            dim,
            weight,
            bias: vec![0.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.weight[i * d..(i + 1) * d];
            *o = self.bias[i] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grad: &mut Affine) -> Vec<f64> {
        let d = self.dim;
        let mut grad_in = vec![0.0; d];
        for i in 0..d {
            let g = grad_out[i];
            if g == 0.0 {
                continue;
            }
            grad.bias[i] += g;
            for j in 0..d {
                grad.weight[i * d + j] += g * x[j];
                grad_in[j] += self.weight[i * d + j] * g;
            }
        }
        grad_in
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            weight: vec![0.0; dim * dim],
            bias: vec![0.0; dim],
        }
    }
}

/// Addresses one scalar trainable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRef {
    User { task: usize, row: usize, col: usize },
    Item { row: usize, col: usize },
    ItemBias { row: usize },
    UserAffineWeight { task: usize, index: usize },
    UserAffineBias { task: usize, index: usize },
    ItemAffineWeight { index: usize },
    ItemAffineBias { index: usize },
}

/// Two-tower model: per-task user tables, one shared item table with a
/// popularity bias per item.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerModel {
    pub(crate) dim: usize,
    pub(crate) tasks: Vec<String>,
    pub(crate) users: Vec<EmbeddingTable>,
    pub(crate) items: EmbeddingTable,
    pub(crate) item_bias: Vec<f64>,
    pub(crate) user_affine: Option<Vec<Affine>>,
    pub(crate) item_affine: Option<Affine>,
}

impl TowerModel {
    pub fn new(dim: usize, tasks: Vec<String>, seed: u64, init_scale: f64, affine: bool) -> Self {
        let users = (0..tasks.len())
            .map(|t| EmbeddingTable::new(dim, seed, 0x5553_4552 + t as u64, init_scale))
            .collect();
        let n_tasks = tasks.len();
        Self {
            dim,
            tasks,
            users,
            items: EmbeddingTable::new(dim, seed, 0x4954_454D, init_scale),
            item_bias: Vec::new(),
            user_affine: affine.then(|| vec![Affine::identity(dim); n_tasks]),
            item_affine: affine.then(|| Affine::identity(dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn task_index(&self, task: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t == task)
    }

    pub fn item_table(&self) -> &EmbeddingTable {
        &self.items
    }

    pub fn user_table(&self, task: usize) -> &EmbeddingTable {
        &self.users[task]
    }

    pub fn has_affine(&self) -> bool {
        self.item_affine.is_some()
    }

    pub fn item_row(&mut self, id: u64) -> usize {
        let i = self.items.get_or_init(id);
        if i == self.item_bias.len() {
            self.item_bias.push(0.0);
        }
        i
    }

    pub fn user_row(&mut self, task: usize, id: u64) -> usize {
        self.users[task].get_or_init(id)
    }

    /// Item tower output `v_emb` for a table row.
    pub fn item_vector(&self, row: usize) -> Vec<f64> {
        let t = self.items.row(row);
        match &self.item_affine {
            Some(a) => {
                let mut out = vec![0.0; self.dim];
                a.apply(t, &mut out);
                out
            }
            None => t.to_vec(),
        }
    }

    pub fn item_bias(&self, row: usize) -> f64 {
        self.item_bias[row]
    }

    pub fn user_vector(&self, task: usize, row: usize) -> Vec<f64> {
        let t = self.users[task].row(row);
        match &self.user_affine {
            Some(a) => {
                let mut out = vec![0.0; self.dim];
                a[task].apply(t, &mut out);
                out
            }
            None => t.to_vec(),
        }
    }

    /// Tower output for a user id, `None` if the id was never trained.
    pub fn user_vector_by_id(&self, task: usize, id: u64) -> Option<Vec<f64>> {
        self.users[task].lookup(id).map(|r| self.user_vector(task, r))
    }

    pub fn item_vector_by_id(&self, id: u64) -> Option<(Vec<f64>, f64)> {
        self.items
            .lookup(id)
            .map(|r| (self.item_vector(r), self.item_bias[r]))
    }

    pub fn param(&self, p: ParamRef) -> f64 {
        let d = self.dim;
        match p {
            ParamRef::User { task, row, col } => self.users[task].row(row)[col],
            ParamRef::Item { row, col } => self.items.row(row)[col],
            ParamRef::ItemBias { row } => self.item_bias[row],
            ParamRef::UserAffineWeight { task, index } => {
                self.user_affine.as_ref().expect("affine")[task].weight[index % (d * d)]
            }
            ParamRef::UserAffineBias { task, index } => {
                self.user_affine.as_ref().expect("affine")[task].bias[index % d]
            }
            ParamRef::ItemAffineWeight { index } => {
                self.item_affine.as_ref().expect("affine").weight[index % (d * d)]
            }
            ParamRef::ItemAffineBias { index } => self.item_affine.as_ref().expect("affine").bias[index % d],
        }
    }

    pub fn param_mut(&mut self, p: ParamRef) -> &mut f64 {
        let d = self.dim;
        match p {
            ParamRef::User { task, row, col } => &mut self.users[task].row_mut(row)[col],
            ParamRef::Item { row, col } => &mut self.items.row_mut(row)[col],
            ParamRef::ItemBias { row } => &mut self.item_bias[row],
            ParamRef::UserAffineWeight { task, index } => {
                &mut self.user_affine.as_mut().expect("affine")[task].weight[index % (d * d)]
            }
            ParamRef::UserAffineBias { task, index } => {
                &mut self.user_affine.as_mut().expect("affine")[task].bias[index % d]
            }
            ParamRef::ItemAffineWeight { index } => {
                &mut self.item_affine.as_mut().expect("affine").weight[index % (d * d)]
            }
            ParamRef::ItemAffineBias { index } => {
                &mut self.item_affine.as_mut().expect("affine").bias[index % d]
            }
        }
    }
}
