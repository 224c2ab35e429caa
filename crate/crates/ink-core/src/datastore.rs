//! Token-level key-value datastore over decoder representations.
//!
//! Every target position of a corpus contributes one entry: the teacher-
//! forced decoder state as the key, the target token at that position as the
//! value, and the (sentence, step) origin for self-exclusion during
//! training-time queries. Entries are laid out in corpus order, then
//! time-step order, so entry indices are stable across refreshes.
//!
//! A datastore is immutable once built. A refresh produces a new datastore
//! with the same values and origins, recomputed keys, and a version exactly
//! one higher; [`DatastoreHandle`] swaps versions atomically while readers
//! keep whatever version they already hold.
//!
//! Keys are stored as `f32` (that is also the on-disk width); all distance
//! arithmetic widens to `f64` so query results are reproducible and safe to
//! compare against a brute-force oracle. Exact search computes squared
//! Euclidean distances per entry with ties broken toward the lower entry
//! index. The optional IVF index trades recall for speed: a k-means coarse
//! quantizer limits the scan to the `n_probe` nearest lists.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, RwLock};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::model::Model;

const MAGIC: &[u8; 4] = b"INKD";
const FORMAT_VERSION: u32 = 1;

/// Where an entry came from: sentence index in the corpus and target-side
/// time step within that sentence.
pub type Origin = (u32, u32);

#[derive(Debug, Clone, PartialEq)]
pub struct DatastoreEntry {
    pub key: Vec<f32>,
    pub value: u32,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Index of the entry inside the datastore.
    pub entry: usize,
    /// The entry's value token.
    pub token: u32,
    /// Euclidean distance from the query.
    pub distance: f64,
}

/// Query result: at most k neighbors, sorted by non-decreasing distance,
/// ties by entry index.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub items: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.items.iter().map(|n| n.token).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum IndexMode {
    Exact,
    Ivf { n_list: usize, n_probe: usize },
}

#[derive(Debug)]
enum Index {
    Flat,
    Ivf {
        n_probe: usize,
        /// n_list x dim centroid matrix.
        centroids: Array2<f64>,
        lists: Vec<Vec<u32>>,
    },
}

#[derive(Debug)]
pub struct Datastore {
    version: u64,
    dim: usize,
    /// count x dim, row-major.
    keys_f32: Vec<f32>,
    /// Same keys widened once; all query math runs on these.
    keys_f64: Vec<f64>,
    values: Vec<u32>,
    origins: Vec<Origin>,
    index: Index,
}

impl Datastore {
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, entry: usize) -> u32 {
        self.values[entry]
    }

    pub fn origin(&self, entry: usize) -> Origin {
        self.origins[entry]
    }

    pub fn key_f32(&self, entry: usize) -> &[f32] {
        &self.keys_f32[entry * self.dim..(entry + 1) * self.dim]
    }

    pub fn key_f64(&self, entry: usize) -> &[f64] {
        &self.keys_f64[entry * self.dim..(entry + 1) * self.dim]
    }

    /// Widened keys of a neighbor set, one row per neighbor, in set order.
    pub fn neighbor_keys(&self, neighbors: &NeighborSet) -> Array2<f64> {
        let mut out = Array2::zeros((neighbors.len(), self.dim));
        for (i, n) in neighbors.items.iter().enumerate() {
            for (j, &v) in self.key_f64(n.entry).iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        out
    }

    pub fn index_mode(&self) -> IndexMode {
        match &self.index {
            Index::Flat => IndexMode::Exact,
            Index::Ivf {
                n_probe, centroids, ..
            } => IndexMode::Ivf {
                n_list: centroids.nrows(),
                n_probe: *n_probe,
            },
        }
    }

    /// Assemble a datastore from explicit entries (tests, benchmarks, and
    /// synthetic workloads). Entries keep the order given.
    pub fn from_entries(dim: usize, entries: &[DatastoreEntry], version: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid_input("datastore dimension must be positive"));
        }
        let mut keys_f32 = Vec::with_capacity(entries.len() * dim);
        let mut values = Vec::with_capacity(entries.len());
        let mut origins = Vec::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.key.len() != dim {
                return Err(Error::invalid_input(format!(
                    "entry {i} has key width {}, expected {dim}",
                    e.key.len()
                )));
            }
            keys_f32.extend_from_slice(&e.key);
            values.push(e.value);
            origins.push(e.origin);
        }
        Ok(Self::from_raw(dim, keys_f32, values, origins, version))
    }

    fn from_raw(
        dim: usize,
        keys_f32: Vec<f32>,
        values: Vec<u32>,
        origins: Vec<Origin>,
        version: u64,
    ) -> Self {
        let keys_f64 = keys_f32.iter().map(|&v| v as f64).collect();
        Datastore {
            version,
            dim,
            keys_f32,
            keys_f64,
            values,
            origins,
            index: Index::Flat,
        }
    }

    /// Build from a corpus with teacher-forced forward passes: one entry per
    /// target position (eos included), corpus order then time-step order.
    /// A fresh build is version 1; pass the retiring datastore's version to
    /// continue the count.
    pub fn build(model: &Model, corpus: &ParallelCorpus, prev_version: u64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid_input("cannot build a datastore from an empty corpus"));
        }
        let dim = model.config.d_model;
        let mut keys_f32 = Vec::with_capacity(corpus.total_target_tokens() * dim);
        let mut values = Vec::with_capacity(corpus.total_target_tokens());
        let mut origins = Vec::with_capacity(corpus.total_target_tokens());
        for (sent, pair) in corpus.pairs.iter().enumerate() {
            let states = model.forward_teacher_forced(&pair.source, &pair.target)?;
            debug_assert_eq!(states.nrows(), pair.target.len());
            for (step, token) in pair.target.iter().enumerate() {
                for j in 0..dim {
                    keys_f32.push(states[[step, j]] as f32);
                }
                values.push(*token);
                origins.push((sent as u32, step as u32));
            }
        }
        Ok(Self::from_raw(dim, keys_f32, values, origins, prev_version + 1))
    }

    /// Rebuild keys for the same corpus under (possibly moved) parameters.
    /// Values and origins must come out identical; the result's version is
    /// exactly one higher than this datastore's.
    pub fn refresh(&self, model: &Model, corpus: &ParallelCorpus) -> Result<Self> {
        let mut fresh = Self::build(model, corpus, self.version)?;
        if fresh.values != self.values || fresh.origins != self.origins {
            return Err(Error::state(
                "refresh corpus does not match the one this datastore was built from",
            ));
        }
        match self.index_mode() {
            IndexMode::Exact => {}
            IndexMode::Ivf { n_list, n_probe } => {
                fresh = fresh.with_ivf_index(n_list, n_probe)?;
            }
        }
        Ok(fresh)
    }

    /// Attach an IVF index: k-means coarse quantizer with deterministic
    /// initialization, `n_probe` lists scanned per query.
    pub fn with_ivf_index(mut self, n_list: usize, n_probe: usize) -> Result<Self> {
        if self.is_empty() {
            return Err(Error::state("cannot index an empty datastore"));
        }
        if n_list == 0 || n_probe == 0 {
            return Err(Error::invalid_input("n_list and n_probe must be positive"));
        }
        let n_list = n_list.min(self.len());
        let n_probe = n_probe.min(n_list);
        let centroids = self.kmeans(n_list, 15);
        let mut lists: Vec<Vec<u32>> = vec![Vec::new(); n_list];
        for entry in 0..self.len() {
            let c = self.nearest_centroid(&centroids, self.key_f64(entry));
            lists[c].push(entry as u32);
        }
        self.index = Index::Ivf {
            n_probe,
            centroids,
            lists,
        };
        Ok(self)
    }

    fn kmeans(&self, n_list: usize, iters: usize) -> Array2<f64> {
        let count = self.len();
        let mut centroids = Array2::zeros((n_list, self.dim));
        // Evenly spaced seeds over the entry order: deterministic and spread.
        for c in 0..n_list {
            let entry = c * count / n_list;
            for (j, &v) in self.key_f64(entry).iter().enumerate() {
                centroids[[c, j]] = v;
            }
        }
        let mut assignment = vec![0usize; count];
        for _ in 0..iters {
            let mut moved = false;
            for (entry, slot) in assignment.iter_mut().enumerate() {
                let c = self.nearest_centroid(&centroids, self.key_f64(entry));
                if *slot != c {
                    *slot = c;
                    moved = true;
                }
            }
            let mut sums = Array2::<f64>::zeros((n_list, self.dim));
            let mut counts = vec![0usize; n_list];
            for (entry, &c) in assignment.iter().enumerate() {
                counts[c] += 1;
                for (j, &v) in self.key_f64(entry).iter().enumerate() {
                    sums[[c, j]] += v;
                }
            }
            for c in 0..n_list {
                if counts[c] > 0 {
                    for j in 0..self.dim {
                        centroids[[c, j]] = sums[[c, j]] / counts[c] as f64;
                    }
                } // empty clusters keep their previous centroid
            }
            if !moved {
                break;
            }
        }
        centroids
    }

    fn nearest_centroid(&self, centroids: &Array2<f64>, key: &[f64]) -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..centroids.nrows() {
            let mut d = 0.0;
            for (j, &v) in key.iter().enumerate() {
                let diff = v - centroids[[c, j]];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }

    /// k nearest entries by Euclidean distance. `exclude` drops the entry
    /// with that origin (training-time self-exclusion). Exact mode scans
    /// everything; IVF mode scans the probed lists only.
    pub fn query(&self, h: &[f64], k: usize, exclude: Option<Origin>) -> Result<NeighborSet> {
        if self.is_empty() {
            return Err(Error::state("query on an empty datastore"));
        }
        if h.len() != self.dim {
            return Err(Error::invalid_input(format!(
                "query width {} does not match datastore dimension {}",
                h.len(),
                self.dim
            )));
        }
        if k == 0 {
            return Err(Error::invalid_input("k must be at least 1"));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("query vector contains non-finite values"));
        }

        let mut heap: BinaryHeap<HeapItem> = BinaryHeap::with_capacity(k + 1);
        match &self.index {
            Index::Flat => {
                self.scan_range(h, 0..self.len(), exclude, k, &mut heap);
            }
            Index::Ivf {
                n_probe,
                centroids,
                lists,
            } => {
                let mut order: Vec<(f64, usize)> = (0..centroids.nrows())
                    .map(|c| {
                        let mut d = 0.0;
                        for (j, &v) in h.iter().enumerate() {
                            let diff = v - centroids[[c, j]];
                            d += diff * diff;
                        }
                        (d, c)
                    })
                    .collect();
                order.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
                for &(_, c) in order.iter().take(*n_probe) {
                    for &entry in &lists[c] {
                        self.consider(h, entry as usize, exclude, k, &mut heap);
                    }
                }
            }
        }

        let mut items: Vec<Neighbor> = heap
            .into_iter()
            .map(|it| Neighbor {
                entry: it.entry,
                token: self.values[it.entry],
                distance: it.d2.max(0.0).sqrt(),
            })
            .collect();
        items.sort_by(|a, b| {
            a.distance
                .partial_cmp(&b.distance)
                .expect("finite")
                .then(a.entry.cmp(&b.entry))
        });
        Ok(NeighborSet { items })
    }

    fn scan_range(
        &self,
        h: &[f64],
        range: std::ops::Range<usize>,
        exclude: Option<Origin>,
        k: usize,
        heap: &mut BinaryHeap<HeapItem>,
    ) {
        for entry in range {
            self.consider(h, entry, exclude, k, heap);
        }
    }

    #[inline]
    fn consider(
        &self,
        h: &[f64],
        entry: usize,
        exclude: Option<Origin>,
        k: usize,
        heap: &mut BinaryHeap<HeapItem>,
    ) {
        if exclude == Some(self.origins[entry]) {
            return;
        }
        let key = &self.keys_f64[entry * self.dim..(entry + 1) * self.dim];
        let mut d2 = 0.0;
        for (a, b) in h.iter().zip(key) {
            let diff = a - b;
            d2 += diff * diff;
        }
        let item = HeapItem { d2, entry };
        if heap.len() < k {
            heap.push(item);
        } else if item < *heap.peek().expect("heap non-empty") {
            heap.pop();
            heap.push(item);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        out.write_u32::<LittleEndian>(self.dim as u32)?;
        out.write_u64::<LittleEndian>(self.len() as u64)?;
        out.write_u64::<LittleEndian>(self.version)?;
        for &v in &self.keys_f32 {
            out.write_f32::<LittleEndian>(v)?;
        }
        for &v in &self.values {
            out.write_u32::<LittleEndian>(v)?;
        }
        for &(sentence, step) in &self.origins {
            out.write_u32::<LittleEndian>(sentence)?;
            out.write_u32::<LittleEndian>(step)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Load a datastore saved by [`Datastore::save`]. The result has a flat
    /// exact index; call [`Datastore::with_ivf_index`] to re-derive one.
    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        read_fully(&mut file, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("not a datastore file (bad magic)"));
        }
        let format = file.read_u32::<LittleEndian>().map_err(truncated)?;
        if format != FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported datastore format version {format}"
            )));
        }
        let dim = file.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let count = file.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let version = file.read_u64::<LittleEndian>().map_err(truncated)?;
        if dim == 0 {
            return Err(Error::format("datastore file declares dimension 0"));
        }

        let mut keys_f32 = vec![0f32; count * dim];
        file.read_f32_into::<LittleEndian>(&mut keys_f32)
            .map_err(truncated)?;
        let mut values = vec![0u32; count];
        file.read_u32_into::<LittleEndian>(&mut values)
            .map_err(truncated)?;
        let mut origins = Vec::with_capacity(count);
        for _ in 0..count {
            let sentence = file.read_u32::<LittleEndian>().map_err(truncated)?;
            let step = file.read_u32::<LittleEndian>().map_err(truncated)?;
            origins.push((sentence, step));
        }
        let mut trailing = [0u8; 1];
        if file.read(&mut trailing)? != 0 {
            return Err(Error::format("trailing bytes after datastore payload"));
        }
        Ok(Self::from_raw(dim, keys_f32, values, origins, version))
    }
}

fn read_fully(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format("datastore file truncated"))
}

fn truncated(_: std::io::Error) -> Error {
    Error::format("datastore file truncated")
}

/// Max-heap item keeping the k smallest (d2, entry) pairs; the lexicographic
/// order doubles as the tie-break toward lower entry indices.
#[derive(PartialEq)]
struct HeapItem {
    d2: f64,
    entry: usize,
}

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .partial_cmp(&other.d2)
            .expect("distances are finite")
            .then(self.entry.cmp(&other.entry))
    }
}

/// Shared, atomically swappable reference to the active datastore version.
/// Readers grab an `Arc` and keep using it even if a newer version lands.
#[derive(Debug)]
pub struct DatastoreHandle {
    inner: RwLock<Arc<Datastore>>,
}

impl DatastoreHandle {
    pub fn new(ds: Datastore) -> Self {
        DatastoreHandle {
            inner: RwLock::new(Arc::new(ds)),
        }
    }

    pub fn current(&self) -> Arc<Datastore> {
        Arc::clone(&self.inner.read().expect("handle poisoned"))
    }

    /// Publish a new version, returning the retired one.
    pub fn swap(&self, ds: Datastore) -> Arc<Datastore> {
        let mut guard = self.inner.write().expect("handle poisoned");
        std::mem::replace(&mut guard, Arc::new(ds))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{RawCorpus, Tokenizer};
    use crate::model::{Model, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn entry(key: &[f32], value: u32, origin: Origin) -> DatastoreEntry {
        DatastoreEntry {
            key: key.to_vec(),
            value,
            origin,
        }
    }

    fn random_store(rng: &mut ChaCha12Rng, count: usize, dim: usize) -> Datastore {
        let entries: Vec<DatastoreEntry> = (0..count)
            .map(|i| DatastoreEntry {
                key: (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                value: rng.gen_range(0..50),
                origin: (i as u32, 0),
            })
            .collect();
        Datastore::from_entries(dim, &entries, 1).unwrap()
    }

    fn brute_force(ds: &Datastore, h: &[f64], k: usize, exclude: Option<Origin>) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = (0..ds.len())
            .filter(|&e| exclude != Some(ds.origin(e)))
            .map(|e| {
                let d2: f64 = ds
                    .key_f64(e)
                    .iter()
                    .zip(h)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d2, e)
            })
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, e)| e).collect()
    }

    fn small_model() -> Model {
        let cfg = ModelConfig {
            d_model: 8,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            d_ffn: 16,
            adapter_inner: 4,
            max_len: 16,
        };
        Model::new_base(cfg, 30, 5).unwrap()
    }

    fn tiny_corpus(vocab_hint: &str) -> ParallelCorpus {
        // Two pairs with target lengths 2 and 3 (pre-eos), so 3 + 4 entries.
        let text = format!("a b\tc d\ne {vocab_hint}\tf g h\n");
        let raw = RawCorpus::parse(text.as_bytes(), Tokenizer::Whitespace).unwrap();
        let vocab = crate::corpus::build_vocabulary(&raw, 1).unwrap();
        raw.encode(&vocab)
    }

    #[test]
    fn build_creates_one_entry_per_target_position() {
        let model = small_model();
        let corpus = tiny_corpus("x");
        let ds = Datastore::build(&model, &corpus, 0).unwrap();
        assert_eq!(ds.len(), corpus.total_target_tokens());
        assert_eq!(ds.len(), 3 + 4, "eos counts as a position");
        assert_eq!(ds.version(), 1);
        // Corpus order, then time-step order.
        let origins: Vec<Origin> = (0..ds.len()).map(|e| ds.origin(e)).collect();
        let mut sorted = origins.clone();
        sorted.sort();
        assert_eq!(origins, sorted);
        assert_eq!(ds.origin(0), (0, 0));
        assert_eq!(ds.origin(3), (1, 0));
        // Values are the target tokens in order.
        assert_eq!(ds.value(2), crate::vocab::EOS);
    }

    #[test]
    fn one_dimensional_hand_example() {
        let ds = Datastore::from_entries(
            1,
            &[entry(&[0.0], 10, (0, 0)), entry(&[1.0], 11, (1, 0))],
            1,
        )
        .unwrap();
        let res = ds.query(&[0.1], 2, None).unwrap();
        assert_eq!(res.items[0].token, 10);
        assert_eq!(res.items[0].distance, 0.1);
        assert_eq!(res.items[1].token, 11);
        assert_eq!(res.items[1].distance, 0.9);
    }

    #[test]
    fn query_equal_to_a_key_returns_distance_zero_first() {
        let ds = Datastore::from_entries(
            2,
            &[
                entry(&[0.25, -0.75], 7, (0, 0)),
                entry(&[1.0, 1.0], 8, (1, 0)),
            ],
            1,
        )
        .unwrap();
        let res = ds.query(&[0.25, -0.75], 1, None).unwrap();
        assert_eq!(res.items[0].token, 7);
        assert_eq!(res.items[0].distance, 0.0, "exact key match is exactly zero");
    }

    #[test]
    fn duplicate_keys_tie_break_to_lower_entry_index() {
        let ds = Datastore::from_entries(
            2,
            &[
                entry(&[0.5, 0.5], 1, (0, 0)),
                entry(&[0.5, 0.5], 2, (1, 0)),
                entry(&[0.5, 0.5], 3, (2, 0)),
            ],
            1,
        )
        .unwrap();
        let res = ds.query(&[0.0, 0.0], 2, None).unwrap();
        assert_eq!(res.items[0].entry, 0);
        assert_eq!(res.items[1].entry, 1);
    }

    #[test]
    fn exact_query_matches_brute_force_scan() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let ds = random_store(&mut rng, 500, 16);
        for _ in 0..50 {
            let h: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for k in [1, 8, 64] {
                let got: Vec<usize> = ds.query(&h, k, None).unwrap().items.iter().map(|n| n.entry).collect();
                let want = brute_force(&ds, &h, k, None);
                assert_eq!(got, want, "k={k}");
            }
        }
    }

    #[test]
    fn self_exclusion_drops_exactly_the_origin_entry() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let ds = random_store(&mut rng, 100, 4);
        // Query with entry 33's own key: unexcluded it comes back first at
        // distance zero; excluded it never appears.
        let h: Vec<f64> = ds.key_f64(33).to_vec();
        let res = ds.query(&h, 5, None).unwrap();
        assert_eq!(res.items[0].entry, 33);
        let res = ds.query(&h, 5, Some(ds.origin(33))).unwrap();
        assert!(res.items.iter().all(|n| n.entry != 33));
        assert_eq!(res.len(), 5);
    }

    #[test]
    fn k_larger_than_available_returns_what_exists() {
        let ds = Datastore::from_entries(
            1,
            &[entry(&[0.0], 1, (0, 0)), entry(&[1.0], 2, (0, 1))],
            1,
        )
        .unwrap();
        let res = ds.query(&[0.5], 10, Some((0, 0))).unwrap();
        assert_eq!(res.len(), 1);
    }

    #[test]
    fn query_errors_are_typed() {
        let ds = Datastore::from_entries(2, &[entry(&[0.0, 0.0], 1, (0, 0))], 1).unwrap();
        assert!(matches!(
            ds.query(&[0.0], 1, None).unwrap_err(),
            Error::InvalidInput(_)
        ));
        let empty = Datastore::from_entries(2, &[], 1).unwrap();
        assert!(matches!(
            empty.query(&[0.0, 0.0], 1, None).unwrap_err(),
            Error::State(_)
        ));
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let ds = random_store(&mut rng, 64, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.inkd");
        ds.save(&path).unwrap();
        let loaded = Datastore::load(&path).unwrap();
        assert_eq!(loaded.version(), ds.version());
        assert_eq!(loaded.dim(), ds.dim());
        assert_eq!(loaded.len(), ds.len());
        for e in 0..ds.len() {
            let a: Vec<u32> = ds.key_f32(e).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = loaded.key_f32(e).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "key bits differ at entry {e}");
            assert_eq!(ds.value(e), loaded.value(e));
            assert_eq!(ds.origin(e), loaded.origin(e));
        }
        // Same queries, same answers.
        let h: Vec<f64> = (0..5).map(|j| 0.1 * j as f64).collect();
        assert_eq!(ds.query(&h, 7, None).unwrap(), loaded.query(&h, 7, None).unwrap());
    }

    #[test]
    fn truncated_and_corrupt_files_are_format_errors() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let ds = random_store(&mut rng, 16, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.inkd");
        ds.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = dir.path().join("cut.inkd");
        std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(Datastore::load(&cut).unwrap_err(), Error::Format(_)));

        let padded = dir.path().join("padded.inkd");
        let mut extra = bytes.clone();
        extra.push(0);
        std::fs::write(&padded, &extra).unwrap();
        assert!(matches!(Datastore::load(&padded).unwrap_err(), Error::Format(_)));

        let bad = dir.path().join("bad.inkd");
        let mut corrupt = bytes;
        corrupt[0] = b'X';
        std::fs::write(&bad, &corrupt).unwrap();
        assert!(matches!(Datastore::load(&bad).unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn refresh_keeps_values_and_origins_and_bumps_version() {
        let model = small_model();
        let corpus = tiny_corpus("y");
        let ds = Datastore::build(&model, &corpus, 0).unwrap();

        // Unchanged parameters: keys are recomputed to identical bits.
        let same = ds.refresh(&model, &corpus).unwrap();
        assert_eq!(same.version(), 2);
        assert_eq!(same.keys_f32, ds.keys_f32);

        // Moved parameters: keys change, values and origins do not.
        let mut moved = model.clone();
        let slot = moved.params.slot("embed");
        moved.params.tensor_mut(slot)[[4, 0]] += 0.5;
        let refreshed = ds.refresh(&moved, &corpus).unwrap();
        assert_eq!(refreshed.version(), 2);
        assert_ne!(refreshed.keys_f32, ds.keys_f32);
        assert_eq!(
            (0..ds.len()).map(|e| ds.value(e)).collect::<Vec<_>>(),
            (0..refreshed.len()).map(|e| refreshed.value(e)).collect::<Vec<_>>()
        );

        // A corpus with different target material is a state error.
        let raw = RawCorpus::parse(b"a b\tc\ne x\tf g h\n".as_slice(), Tokenizer::Whitespace).unwrap();
        let vocab = crate::corpus::build_vocabulary(&raw, 1).unwrap();
        let other = raw.encode(&vocab);
        assert!(matches!(ds.refresh(&model, &other).unwrap_err(), Error::State(_)));
    }

    #[test]
    fn handle_swaps_atomically_and_old_version_stays_readable() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let handle = DatastoreHandle::new(random_store(&mut rng, 10, 2));
        let old = handle.current();
        assert_eq!(old.version(), 1);
        let mut newer = random_store(&mut rng, 10, 2);
        newer.version = 2;
        let retired = handle.swap(newer);
        assert_eq!(retired.version(), 1);
        assert_eq!(handle.current().version(), 2);
        // The pre-swap reference still answers queries.
        assert!(old.query(&[0.0, 0.0], 3, None).is_ok());
    }

    #[test]
    fn ivf_with_full_probe_is_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let flat = random_store(&mut rng, 400, 8);
        let mut rng2 = ChaCha12Rng::seed_from_u64(11);
        let ivf = random_store(&mut rng2, 400, 8)
            .with_ivf_index(16, 16)
            .unwrap();
        for q in 0..20 {
            let h: Vec<f64> = (0..8).map(|j| ((q * 8 + j) as f64 * 0.37).sin()).collect();
            assert_eq!(
                flat.query(&h, 8, None).unwrap(),
                ivf.query(&h, 8, None).unwrap(),
                "probing every list must equal the flat scan"
            );
        }
    }

    #[test]
    fn ivf_recall_is_reported_not_asserted() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let flat = random_store(&mut rng, 1000, 8);
        let mut rng2 = ChaCha12Rng::seed_from_u64(12);
        let ivf = random_store(&mut rng2, 1000, 8)
            .with_ivf_index(32, 4)
            .unwrap();
        let mut hits = 0usize;
        let mut total = 0usize;
        for q in 0..50 {
            let h: Vec<f64> = (0..8).map(|j| ((q * 8 + j) as f64 * 0.73).cos()).collect();
            let exact: std::collections::HashSet<usize> =
                flat.query(&h, 8, None).unwrap().items.iter().map(|n| n.entry).collect();
            let approx = ivf.query(&h, 8, None).unwrap();
            hits += approx.items.iter().filter(|n| exact.contains(&n.entry)).count();
            total += exact.len();
        }
        let recall = hits as f64 / total as f64;
        println!("ivf recall@8 with n_probe=4/32: {recall:.3}");
        assert!((0.0..=1.0).contains(&recall));
    }
}
