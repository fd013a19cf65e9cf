use crate::model::forward::KeySource;
use crate::model::Modality;
use crate::planner::{LayerRole, LazyMode};
use crate::tensor::Matrix;

/// Anchor queries shared by the lazy layers of the block currently running.
/// Holds one block at a time; publishing for a new block replaces the old one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QCache {
    block: Option<usize>,
    queries: Vec<Matrix>,
    peak_bytes: usize,
}

impl QCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn publish(&mut self, block: usize, queries: Vec<Matrix>) {
        self.block = Some(block);
        self.queries = queries;
        self.peak_bytes = self.peak_bytes.max(self.bytes());
    }

    pub(crate) fn release(&mut self) {
        self.block = None;
        self.queries.clear();
    }

    /// Block whose anchor queries are resident, if any.
    pub fn block(&self) -> Option<usize> {
        self.block
    }

    /// Per-head queries of the resident block.
    pub fn queries(&self) -> &[Matrix] {
        &self.queries
    }

    pub fn bytes(&self) -> usize {
        self.queries.iter().map(Matrix::bytes).sum()
    }

    /// Largest footprint reached since creation.
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }
}

/// How a layer finds its key rows.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum KeyLayout {
    /// The layer's own keys, one per stored position.
    Own,
    /// The anchor's keys, row for row.
    AnchorDense,
    /// Mixed: own text keys and anchor rows, in position order.
    Gathered(Vec<KeySource>),
}

/// One layer of a lazy store. `values` rows follow `positions`; own `keys`
/// rows follow `key_positions`, which is a subset of `positions`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStore {
    pub(crate) role: LayerRole,
    pub(crate) keys: Vec<Matrix>,
    pub(crate) values: Vec<Matrix>,
    pub(crate) positions: Vec<usize>,
    pub(crate) modality: Vec<Modality>,
    pub(crate) key_positions: Vec<usize>,
    pub(crate) layout: KeyLayout,
}

impl LayerStore {
    pub fn role(&self) -> LayerRole {
        self.role
    }

    /// Number of positions this layer attends over.
    pub fn stored_len(&self) -> usize {
        self.positions.len()
    }

    /// Sequence positions of the stored rows, ascending.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn own_key_rows(&self) -> usize {
        self.key_positions.len()
    }

    pub fn key_bytes(&self) -> usize {
        self.keys.iter().map(Matrix::bytes).sum()
    }

    pub fn value_bytes(&self) -> usize {
        self.values.iter().map(Matrix::bytes).sum()
    }

    pub fn bytes(&self) -> usize {
        self.key_bytes() + self.value_bytes()
    }

    pub fn modality_index(&self) -> ModalityIndex {
        let mut idx = ModalityIndex::default();
        for (&p, &m) in self.positions.iter().zip(&self.modality) {
            match m {
                Modality::Text => idx.text_positions.push(p),
                Modality::Visual => idx.visual_positions.push(p),
            }
        }
        idx
    }
}

/// Text and visual positions of a stored sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModalityIndex {
    pub text_positions: Vec<usize>,
    pub visual_positions: Vec<usize>,
}

impl ModalityIndex {
    pub fn from_modality(modality: &[Modality]) -> Self {
        let mut idx = Self::default();
        for (p, &m) in modality.iter().enumerate() {
            match m {
                Modality::Text => idx.text_positions.push(p),
                Modality::Visual => idx.visual_positions.push(p),
            }
        }
        idx
    }

    pub fn len(&self) -> usize {
        self.text_positions.len() + self.visual_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-request caches of a lazy run: full K/V for standard and anchor layers,
/// V only for GLA lazy layers, text K plus V for VLA lazy layers.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedCacheStore {
    pub(crate) mode: LazyMode,
    pub(crate) layers: Vec<LayerStore>,
    pub(crate) next_position: usize,
    pub(crate) prompt_len: usize,
}

impl SharedCacheStore {
    pub fn mode(&self) -> LazyMode {
        self.mode
    }

    pub fn layers(&self) -> &[LayerStore] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerStore {
        &self.layers[l]
    }

    /// Total K and V bytes held, excluding the query cache.
    pub fn kv_bytes(&self) -> usize {
        self.layers.iter().map(LayerStore::bytes).sum()
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// Modality split seen by the last layer.
    pub fn modality_index(&self) -> ModalityIndex {
        self.layers.last().expect("store has layers").modality_index()
    }
}
