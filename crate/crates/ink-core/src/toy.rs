//! Synthetic two-domain translation task.
//!
//! The task mimics a general model meeting an unseen domain. A source
//! "language" of concept words is mapped to target words by a per-domain
//! lexicon:
//!
//! * shared concepts translate the same way in both domains,
//! * ambiguous concepts have a domain A sense and a different domain B sense,
//! * domain-only concepts never occur in domain A at all.
//!
//! Domain A is the pretraining corpus; domain B is the adaptation corpus with
//! its own dev and test splits. Concepts are drawn from a Zipf-like
//! distribution whose ordering differs per domain, so domain B is dominated
//! by exactly the tokens the base model handles worst.
//!
//! There is also a trivial copy task used for optimizer sanity checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTaskConfig {
    pub shared_concepts: usize,
    pub ambiguous_concepts: usize,
    pub domain_only_concepts: usize,
    pub pretrain_pairs: usize,
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Zipf exponent for concept sampling.
    pub zipf_s: f64,
    /// Probability that an ambiguous concept in a train pair keeps its
    /// domain A sense, imitating imperfectly filtered adaptation data.
    /// Dev and test stay clean.
    pub train_noise: f64,
    pub seed: u64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        // ~5,000 pairs and a vocabulary of ~200 token types overall.
        ToyTaskConfig {
            shared_concepts: 60,
            ambiguous_concepts: 16,
            domain_only_concepts: 16,
            pretrain_pairs: 3200,
            train_pairs: 1400,
            dev_pairs: 240,
            test_pairs: 160,
            min_len: 3,
            max_len: 6,
            zipf_s: 1.1,
            train_noise: 0.0,
            seed: 13,
        }
    }
}

/// Generated corpora as raw `source<TAB>target` lines.
#[derive(Debug)]
pub struct ToyTask {
    pub pretrain: Vec<String>,
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl ToyTask {
    pub fn all_lines(&self) -> Vec<String> {
        let mut lines = self.pretrain.clone();
        lines.extend(self.train.iter().cloned());
        lines.extend(self.dev.iter().cloned());
        lines.extend(self.test.iter().cloned());
        lines
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Domain {
    A,
    B,
}

#[derive(Clone, Copy)]
enum Concept {
    Shared(usize),
    Ambiguous(usize),
    BOnly(usize),
}

impl Concept {
    fn source_word(self) -> String {
        match self {
            Concept::Shared(i) => format!("w{i:03}"),
            Concept::Ambiguous(i) => format!("w9{i:02}"),
            Concept::BOnly(i) => format!("w8{i:02}"),
        }
    }

    fn target_word(self, domain: Domain) -> String {
        match (self, domain) {
            (Concept::Shared(i), _) => format!("x{i:03}"),
            (Concept::Ambiguous(i), Domain::A) => format!("a9{i:02}"),
            (Concept::Ambiguous(i), Domain::B) => format!("b9{i:02}"),
            (Concept::BOnly(i), _) => format!("b8{i:02}"),
        }
    }
}

pub fn generate(cfg: &ToyTaskConfig) -> ToyTask {
    // Domain A never sees B-only concepts and leans heavily on shared ones.
    let mut domain_a: Vec<Concept> = Vec::new();
    for i in 0..cfg.shared_concepts {
        domain_a.push(Concept::Shared(i));
    }
    for i in 0..cfg.ambiguous_concepts {
        domain_a.push(Concept::Ambiguous(i));
    }

    // Domain B puts ambiguous and B-only concepts at the head of the Zipf
    // ordering, so its frequent tokens are the ones domain A mistranslates
    // or never saw.
    let mut domain_b: Vec<Concept> = Vec::new();
    for i in 0..cfg.ambiguous_concepts {
        domain_b.push(Concept::Ambiguous(i));
    }
    for i in 0..cfg.domain_only_concepts {
        domain_b.push(Concept::BOnly(i));
    }
    for i in 0..cfg.shared_concepts {
        domain_b.push(Concept::Shared(i));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let pretrain = sentences(cfg, &domain_a, Domain::A, cfg.pretrain_pairs, 0.0, &mut rng);
    let train = sentences(cfg, &domain_b, Domain::B, cfg.train_pairs, cfg.train_noise, &mut rng);
    let dev = sentences(cfg, &domain_b, Domain::B, cfg.dev_pairs, 0.0, &mut rng);
    let test = sentences(cfg, &domain_b, Domain::B, cfg.test_pairs, 0.0, &mut rng);

    ToyTask {
        pretrain,
        train,
        dev,
        test,
    }
}

fn sentences(
    cfg: &ToyTaskConfig,
    concepts: &[Concept],
    domain: Domain,
    n: usize,
    noise: f64,
    rng: &mut ChaCha12Rng,
) -> Vec<String> {
    let cdf = zipf_cdf(concepts.len(), cfg.zipf_s);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let picked: Vec<Concept> = (0..len)
                .map(|_| concepts[sample_cdf(&cdf, rng)])
                .collect();
            let source: Vec<String> = picked.iter().map(|c| c.source_word()).collect();
            let target: Vec<String> = picked
                .iter()
                .map(|c| {
                    let d = match c {
                        Concept::Ambiguous(_) if noise > 0.0 && rng.gen_bool(noise) => Domain::A,
                        _ => domain,
                    };
                    c.target_word(d)
                })
                .collect::<Vec<String>>();
            format!("{}\t{}", source.join(" "), target.join(" "))
        })
        .collect()
}

fn zipf_cdf(n: usize, s: f64) -> Vec<f64> {
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for i in 0..n {
        acc += 1.0 / ((i + 1) as f64).powf(s);
        cdf.push(acc);
    }
    let total = *cdf.last().expect("at least one concept");
    for v in &mut cdf {
        *v /= total;
    }
    cdf
}

fn sample_cdf(cdf: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let u: f64 = rng.gen();
    cdf.partition_point(|&c| c < u).min(cdf.len() - 1)
}

/// Copy task: the target repeats the source. Useful for verifying that the
/// optimizer and schedule can drive a small model to (near-)perfect accuracy.
pub fn generate_copy_task(n_pairs: usize, n_words: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n_pairs)
        .map(|_| {
            let len = rng.gen_range(min_len..=max_len);
            let words: Vec<String> = (0..len)
                .map(|_| format!("c{:02}", rng.gen_range(0..n_words)))
                .collect();
            let s = words.join(" ");
            format!("{s}\t{s}")
        })
        .collect()
}
