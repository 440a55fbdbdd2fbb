//! Correlated topic model: per-document PG-SVI and held-out likelihood.
//!
//! Topics `β` and the logistic-normal prior `N(μ, Σ)` are fixed. Each
//! document `d` has its own `q_d = N(m_d, V_d)`; an iteration draws a
//! mini-batch of documents, rescales their score-function gradients by
//! `D / M`, and applies the closed-form proximal step with the KL divergence
//! to every document:
//!
//! ```text
//! V⁻¹ = (1 − r)(Σ⁻¹ + 2 Ĝ_V) + r V_k⁻¹
//! ((1 − r) Σ⁻¹ + r V_k⁻¹) m = (1 − r)(Σ⁻¹ μ − ĝ_m) + r V_k⁻¹ m_k
//! ```
//!
//! Documents outside the mini-batch have zero gradient. The mean-field
//! variant keeps `V` diagonal by using only the diagonals of `Σ⁻¹` and `Ĝ_V`
//! in the precision update.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{check_dim, domain, Error, Result};
use crate::estimators::{select_minibatch, Sampling};
use crate::linalg::{CholeskyFactor, SymmetricMatrix};
use crate::models::{ctm_difficult_grads, kl_gaussian, softmax, validate_topics, CtmModel, GaussianVariational};
use crate::rng::{mix, stream};
use crate::solver::RunStatus;

/// Sparse bag of words.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Document {
    /// `(word index, count)` with distinct indices and positive counts.
    pub words: Vec<(usize, u32)>,
}

impl Document {
    pub fn new(mut words: Vec<(usize, u32)>) -> Result<Self> {
        words.retain(|&(_, c)| c > 0);
        words.sort_unstable();
        if words.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(domain("document repeats a word index"));
        }
        Ok(Self { words })
    }

    pub fn total(&self) -> u64 {
        self.words.iter().map(|&(_, c)| u64::from(c)).sum()
    }

    /// Dense count vector over a vocabulary of `n`.
    pub fn dense(&self, n: usize) -> Result<Vec<u32>> {
        let mut out = vec![0; n];
        for &(w, c) in &self.words {
            if w >= n {
                return Err(domain(format!("word index {w} outside vocabulary of {n}")));
            }
            out[w] = c;
        }
        Ok(out)
    }

    fn tokens(&self) -> Vec<usize> {
        self.words
            .iter()
            .flat_map(|&(w, c)| std::iter::repeat_n(w, c as usize))
            .collect()
    }

    fn from_tokens(tokens: &[usize]) -> Self {
        let mut words: Vec<(usize, u32)> = Vec::new();
        let mut sorted = tokens.to_vec();
        sorted.sort_unstable();
        for w in sorted {
            match words.last_mut() {
                Some((lw, c)) if *lw == w => *c += 1,
                _ => words.push((w, 1)),
            }
        }
        Self { words }
    }
}

/// Train and test documents; each test document is split into `(y¹, y²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<Document>,
    pub test: Vec<Document>,
    pub halves: Vec<(Document, Document)>,
}

/// Seeded uniform split; each test document's tokens are shuffled and halved.
pub fn split_corpus(docs: &[Document], test_fraction: f64, seed: u64) -> Result<CorpusSplit> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(domain("test fraction must lie in [0, 1]"));
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut stream(seed, 0, 0x5711));
    let n_test = (docs.len() as f64 * test_fraction).round() as usize;
    let (test_ix, train_ix) = order.split_at(n_test);
    let mut test_ix = test_ix.to_vec();
    let mut train_ix = train_ix.to_vec();
    test_ix.sort_unstable();
    train_ix.sort_unstable();
    let test: Vec<Document> = test_ix.iter().map(|&i| docs[i].clone()).collect();
    let halves = test
        .iter()
        .enumerate()
        .map(|(j, d)| {
            let mut t = d.tokens();
            t.shuffle(&mut stream(seed, j as u64 + 1, 0x4A1F));
            let (a, b) = t.split_at(t.len() / 2);
            (Document::from_tokens(a), Document::from_tokens(b))
        })
        .collect();
    Ok(CorpusSplit {
        train: train_ix.iter().map(|&i| docs[i].clone()).collect(),
        test,
        halves,
    })
}

/// Reads `"N_vocab K_topics"` then one `word:count ...` line per document.
pub fn read_corpus(path: &Path) -> Result<(usize, usize, Vec<Document>)> {
    let text = fs::read_to_string(path)?;
    parse_corpus(&text, path)
}

fn parse_corpus(text: &str, path: &Path) -> Result<(usize, usize, Vec<Document>)> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| err(1, format!("bad header token '{t}'"))))
        .collect::<Result<_>>()?;
    let [n_vocab, k] = dims[..] else {
        return Err(err(1, "header must be 'N_vocab K_topics'".into()));
    };
    let mut docs = Vec::new();
    for (i, line) in lines {
        let mut words = Vec::new();
        for tok in line.split_whitespace() {
            let (w, c) = tok
                .split_once(':')
                .ok_or_else(|| err(i + 1, format!("expected word:count, got '{tok}'")))?;
            let w: usize = w.parse().map_err(|_| err(i + 1, format!("bad word index '{w}'")))?;
            let c: u32 = c.parse().map_err(|_| err(i + 1, format!("bad count '{c}'")))?;
            if w >= n_vocab {
                return Err(err(i + 1, format!("word index {w} outside vocabulary of {n_vocab}")));
            }
            words.push((w, c));
        }
        docs.push(Document::new(words).map_err(|e| err(i + 1, e.to_string()))?);
    }
    Ok((n_vocab, k, docs))
}

pub fn write_corpus(path: &Path, n_vocab: usize, k: usize, docs: &[Document]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{n_vocab} {k}")?;
    for d in docs {
        let line: Vec<String> = d.words.iter().map(|(w, c)| format!("{w}:{c}")).collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Reads a headerless dense `N × K` topic-word CSV.
pub fn read_topic_word(path: &Path) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|t| {
                t.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("bad number '{t}'"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let k = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != k) {
        return Err(domain("topic-word rows have unequal lengths"));
    }
    let m = DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]);
    validate_topics(&m)?;
    Ok(m)
}

pub fn write_topic_word(path: &Path, beta: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in beta.row_iter() {
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Generating parameters and documents of a synthetic corpus.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub topic_word: DMatrix<f64>,
    pub prior_mean: DVector<f64>,
    pub prior_cov: SymmetricMatrix,
    pub docs: Vec<Document>,
}

/// Draws a corpus from the model: `β_{·k} ~ Dir(0.3)`, `z_d ~ N(0, Σ)`,
/// topic `~ softmax(z_d)`, word `~ β_{·topic}`.
pub fn synthetic_corpus(k: usize, n_vocab: usize, n_docs: usize, words_per_doc: usize, seed: u64) -> Result<SyntheticCorpus> {
    if k == 0 || n_vocab == 0 {
        return Err(domain("need at least one topic and one word"));
    }
    let mut rng = stream(seed, 0, 0xC7A0);
    let gamma = Gamma::new(0.3, 1.0).map_err(|e| domain(e.to_string()))?;
    let mut beta = DMatrix::from_fn(n_vocab, k, |_, _| { let g: f64 = gamma.sample(&mut rng); g.max(1e-12) });
    // Twice, so columns sum to 1 to rounding.
    for _ in 0..2 {
        for mut col in beta.column_iter_mut() {
            let s = col.sum();
            col /= s;
        }
    }
    let sigma = SymmetricMatrix::from_fn(k, |i, j| if i == j { 1.0 } else { 0.4 })?;
    let mu = DVector::zeros(k);
    let chol = CholeskyFactor::new(&sigma)?;
    let mut docs = Vec::with_capacity(n_docs);
    for d in 0..n_docs {
        let mut r = stream(seed, d as u64 + 1, 0xC7A1);
        let eps = DVector::from_fn(k, |_, _| r.sample::<f64, _>(StandardNormal));
        let theta = softmax(&(&mu + chol.lower() * eps));
        let mut tokens = Vec::with_capacity(words_per_doc);
        for _ in 0..words_per_doc {
            let t = sample_categorical(theta.as_slice(), r.random());
            let col: Vec<f64> = beta.column(t).iter().copied().collect();
            tokens.push(sample_categorical(&col, r.random()));
        }
        docs.push(Document::from_tokens(&tokens));
    }
    Ok(SyntheticCorpus {
        topic_word: beta,
        prior_mean: mu,
        prior_cov: sigma,
        docs,
    })
}

fn sample_categorical(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtmVariant {
    Full,
    MeanField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtmConfig {
    pub variant: CtmVariant,
    pub beta_step: f64,
    pub docs_per_batch: usize,
    pub samples: usize,
    pub seed: u64,
    pub passes: usize,
    /// Passes averaged in the reported ELBO.
    pub moving_average: usize,
    pub record_timing: bool,
}

impl Default for CtmConfig {
    fn default() -> Self {
        Self {
            variant: CtmVariant::Full,
            beta_step: 0.001,
            docs_per_batch: 2,
            samples: 100,
            seed: 0,
            passes: 10,
            moving_average: 5,
            record_timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtmTraceRow {
    pub pass: usize,
    pub iteration: usize,
    /// Stochastic corpus ELBO at the end of the pass.
    pub elbo: f64,
    /// Monte Carlo standard error of `elbo`.
    pub elbo_std_error: f64,
    /// Mean of the last `moving_average` values of `elbo`.
    pub elbo_moving_average: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtmTrace {
    pub rows: Vec<CtmTraceRow>,
    pub status: RunStatus,
}

#[derive(Debug, Clone)]
pub struct CtmFit {
    pub q: Vec<GaussianVariational>,
    pub trace: CtmTrace,
}

struct DocState {
    model: CtmModel,
    mean: DVector<f64>,
    precision: SymmetricMatrix,
}

impl DocState {
    fn q(&self) -> Result<GaussianVariational> {
        GaussianVariational::full(self.mean.clone(), CholeskyFactor::new(&self.precision)?.inverse())
    }
}

/// Fits one `q` per document in `docs`, starting from the prior.
pub fn fit_ctm(
    docs: &[Document],
    topic_word: Arc<DMatrix<f64>>,
    prior_mean: &DVector<f64>,
    prior_cov: &SymmetricMatrix,
    cfg: &CtmConfig,
) -> Result<CtmFit> {
    validate_topics(&topic_word)?;
    let k = topic_word.ncols();
    let n_vocab = topic_word.nrows();
    check_dim(k, prior_mean.len())?;
    check_dim(k, prior_cov.order())?;
    if docs.is_empty() {
        return Err(domain("corpus is empty"));
    }
    if cfg.docs_per_batch == 0 || cfg.docs_per_batch > docs.len() {
        return Err(domain(format!("documents per batch must lie in [1, {}]", docs.len())));
    }
    if !(cfg.beta_step > 0.0) || !cfg.beta_step.is_finite() {
        return Err(domain("step size must be finite and > 0"));
    }
    if cfg.samples == 0 || cfg.moving_average == 0 {
        return Err(domain("samples and moving-average window must be >= 1"));
    }
    let sigma_inv = CholeskyFactor::new(prior_cov)?.inverse();
    let init_precision = match cfg.variant {
        CtmVariant::Full => sigma_inv.clone(),
        CtmVariant::MeanField => SymmetricMatrix::from_diagonal(sigma_inv.diagonal().as_slice())?,
    };
    let sigma_inv_mu = sigma_inv.mul_vec(prior_mean);
    let mut states = docs
        .iter()
        .map(|d| {
            Ok(DocState {
                model: CtmModel::new(topic_word.clone(), prior_mean.clone(), prior_cov.clone(), d.dense(n_vocab)?)?,
                mean: prior_mean.clone(),
                precision: init_precision.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n_docs = docs.len();
    let scale = n_docs as f64 / cfg.docs_per_batch as f64;
    let per_pass = n_docs.div_ceil(cfg.docs_per_batch);
    let r = 1.0 / (1.0 + cfg.beta_step);
    let start = Instant::now();
    let wall = || if cfg.record_timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };

    // The same draws are reused every pass, so changes between passes
    // reflect `q` rather than fresh sampling noise.
    let corpus_elbo = |states: &[DocState]| -> Result<(f64, f64)> {
        let mut acc = 0.0;
        let mut var = 0.0;
        for (d, s) in states.iter().enumerate() {
            let q = s.q()?;
            let g = ctm_difficult_grads(&s.model, &q, cfg.samples, mix(cfg.seed, 0xE1B0, d as u64))?;
            acc -= g.value + kl_gaussian(&q.mean, &q.covariance()?, prior_mean, prior_cov)?;
            var += g.value_std_error * g.value_std_error;
        }
        Ok((acc, var.sqrt()))
    };

    let (e0, se0) = corpus_elbo(&states)?;
    let mut raw = vec![e0];
    let mut rows = vec![CtmTraceRow {
        pass: 0,
        iteration: 0,
        elbo: e0,
        elbo_std_error: se0,
        elbo_moving_average: e0,
        wall_ms: wall(),
    }];
    let mut status = RunStatus::BudgetExhausted;
    let mut iter = 0usize;

    'passes: for pass in 1..=cfg.passes {
        for _ in 0..per_pass {
            let seed = mix(cfg.seed, iter as u64, 0xC7B);
            let batch = select_minibatch(n_docs, cfg.docs_per_batch, Sampling::WithoutReplacement, seed)?;
            let mut grads: Vec<Option<(DVector<f64>, SymmetricMatrix)>> = vec![None; n_docs];
            for &d in &batch {
                let q = states[d].q()?;
                let g = ctm_difficult_grads(&states[d].model, &q, cfg.samples, mix(seed, d as u64, 1))?;
                let gv = match cfg.variant {
                    CtmVariant::Full => g.grad_v,
                    CtmVariant::MeanField => SymmetricMatrix::from_diagonal(g.grad_v.diagonal().as_slice())?,
                };
                grads[d] = Some((g.grad_m * scale, gv.scale(scale)));
            }
            for (d, s) in states.iter_mut().enumerate() {
                if let Err(e) = prox_update(s, grads[d].as_ref(), &sigma_inv, &sigma_inv_mu, r, cfg.variant) {
                    match e {
                        Error::NotPositiveDefinite { .. } => {
                            warn!("document {d}: {e}; marking run as diverged");
                            status = RunStatus::Diverged;
                            break 'passes;
                        }
                        e => return Err(e),
                    }
                }
            }
            iter += 1;
        }
        let (e, se) = match corpus_elbo(&states) {
            Ok(v) => v,
            Err(Error::NotPositiveDefinite { .. }) => (f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
        raw.push(e);
        let lo = raw.len().saturating_sub(cfg.moving_average);
        let window = &raw[lo..];
        rows.push(CtmTraceRow {
            pass,
            iteration: iter,
            elbo: e,
            elbo_std_error: se,
            elbo_moving_average: window.iter().sum::<f64>() / window.len() as f64,
            wall_ms: wall(),
        });
        if !e.is_finite() {
            status = RunStatus::Diverged;
            break;
        }
    }
    let q = states.iter().map(DocState::q).collect::<Result<Vec<_>>>();
    let q = match q {
        Ok(q) => q,
        Err(Error::NotPositiveDefinite { .. }) => {
            status = RunStatus::Diverged;
            Vec::new()
        }
        Err(e) => return Err(e),
    };
    Ok(CtmFit {
        q,
        trace: CtmTrace { rows, status },
    })
}

fn prox_update(
    s: &mut DocState,
    grad: Option<&(DVector<f64>, SymmetricMatrix)>,
    sigma_inv: &SymmetricMatrix,
    sigma_inv_mu: &DVector<f64>,
    r: f64,
    variant: CtmVariant,
) -> Result<()> {
    let k = s.mean.len();
    let zero_m = DVector::zeros(k);
    let (gm, gv) = match grad {
        Some((gm, gv)) => (gm.clone(), Some(gv)),
        None => (zero_m, None),
    };
    let prec_target = match variant {
        CtmVariant::Full => sigma_inv.clone(),
        CtmVariant::MeanField => SymmetricMatrix::from_diagonal(sigma_inv.diagonal().as_slice())?,
    };
    let prec_target = match gv {
        Some(gv) => prec_target.combine(1.0, gv, 2.0)?,
        None => prec_target,
    };
    let new_prec = prec_target.combine(1.0 - r, &s.precision, r)?;
    let lhs = sigma_inv.combine(1.0 - r, &s.precision, r)?;
    let rhs = (sigma_inv_mu - gm) * (1.0 - r) + s.precision.mul_vec(&s.mean) * r;
    let mean = CholeskyFactor::new(&lhs)?.solve(&rhs);
    CholeskyFactor::new(&new_prec)?;
    s.mean = mean;
    s.precision = new_prec;
    Ok(())
}

/// The prior as `q` for every document, the held-out reference.
pub fn prior_as_posterior(prior_mean: &DVector<f64>, prior_cov: &SymmetricMatrix, n_docs: usize) -> Result<Vec<GaussianVariational>> {
    (0..n_docs)
        .map(|_| GaussianVariational::full(prior_mean.clone(), prior_cov.clone()))
        .collect()
}

/// Sum of `log p̂(y_n)` over word occurrences of `held_out` and the token count.
fn heldout_sum(
    q: &GaussianVariational,
    topic_word: &DMatrix<f64>,
    held_out: &Document,
    s_eval: usize,
    seed: u64,
) -> Result<(f64, u64)> {
    let k = topic_word.ncols();
    check_dim(k, q.dim())?;
    if s_eval < 100 {
        return Err(domain("held-out evaluation needs at least 100 samples"));
    }
    let total = held_out.total();
    if total == 0 {
        return Err(domain("held-out half has no words"));
    }
    for &(w, _) in &held_out.words {
        if w >= topic_word.nrows() {
            return Err(domain(format!("word index {w} outside vocabulary of {}", topic_word.nrows())));
        }
    }
    let chol = q.covariance_factor()?;
    let mut probs = vec![0.0; held_out.words.len()];
    for s in 0..s_eval {
        let mut rng = stream(seed, s as u64, 0x4E1D);
        let eps = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let theta = softmax(&(&q.mean + chol.lower() * eps));
        for (p, &(w, _)) in probs.iter_mut().zip(&held_out.words) {
            *p += topic_word.row(w).transpose().dot(&theta);
        }
    }
    let sum = probs
        .iter()
        .zip(&held_out.words)
        .map(|(p, &(_, c))| f64::from(c) * (p / s_eval as f64).ln())
        .sum();
    Ok((sum, total))
}

/// Count-weighted mean natural-log predictive probability of the words of
/// `held_out` under `q`, estimated with `s_eval` draws.
pub fn heldout_loglik(
    q: &GaussianVariational,
    topic_word: &DMatrix<f64>,
    held_out: &Document,
    s_eval: usize,
    seed: u64,
) -> Result<f64> {
    let (sum, total) = heldout_sum(q, topic_word, held_out, s_eval, seed)?;
    Ok(sum / total as f64)
}

/// Per-word held-out log-likelihood pooled over documents.
pub fn corpus_heldout_loglik(
    qs: &[GaussianVariational],
    topic_word: &DMatrix<f64>,
    held_out: &[Document],
    s_eval: usize,
    seed: u64,
) -> Result<f64> {
    check_dim(qs.len(), held_out.len())?;
    let mut sum = 0.0;
    let mut total = 0;
    for (d, (q, y)) in qs.iter().zip(held_out).enumerate() {
        if y.total() == 0 {
            continue;
        }
        let (s, t) = heldout_sum(q, topic_word, y, s_eval, mix(seed, d as u64, 0x4E1E))?;
        sum += s;
        total += t;
    }
    if total == 0 {
        return Err(domain("held-out documents have no words"));
    }
    Ok(sum / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prior(k: usize) -> (DVector<f64>, SymmetricMatrix) {
        (
            DVector::from_fn(k, |i, _| 0.1 * i as f64),
            SymmetricMatrix::from_fn(k, |i, j| if i == j { 1.0 } else { 0.3 }).unwrap(),
        )
    }

    #[test]
    fn corpus_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        let docs = vec![Document::new(vec![(3, 2), (0, 1)]).unwrap(), Document::default()];
        write_corpus(&p, 5, 2, &docs).unwrap();
        let (n, k, back) = read_corpus(&p).unwrap();
        assert_eq!((n, k), (5, 2));
        assert_eq!(back, docs);
        let beta = DMatrix::from_row_slice(3, 2, &[0.5, 0.2, 0.25, 0.3, 0.25, 0.5]);
        let bp = dir.path().join("b.csv");
        write_topic_word(&bp, &beta).unwrap();
        assert_eq!(read_topic_word(&bp).unwrap(), beta);
    }

    #[test]
    fn corpus_parse_errors_carry_line() {
        let r = parse_corpus("4 2\n0:1 9:1\n", Path::new("x"));
        assert!(matches!(r, Err(Error::Parse { line: 2, .. })));
        assert!(parse_corpus("4\n", Path::new("x")).is_err());
    }

    #[test]
    fn halves_partition_documents() {
        let c = synthetic_corpus(3, 20, 12, 30, 4).unwrap();
        let split = split_corpus(&c.docs, 0.5, 9).unwrap();
        assert_eq!(split.test.len(), 6);
        assert_eq!(split.train.len() + split.test.len(), 12);
        for (d, (a, b)) in split.test.iter().zip(&split.halves) {
            let mut t = a.tokens();
            t.extend(b.tokens());
            t.sort_unstable();
            assert_eq!(t, d.tokens());
        }
    }

    #[test]
    fn single_topic_posterior_stays_at_prior() {
        let beta = Arc::new(DMatrix::from_column_slice(4, 1, &[0.1, 0.2, 0.3, 0.4]));
        let (mu, sigma) = prior(1);
        let docs = vec![Document::new(vec![(0, 3), (2, 1)]).unwrap(), Document::new(vec![(3, 5)]).unwrap()];
        let cfg = CtmConfig {
            passes: 20,
            beta_step: 0.5,
            docs_per_batch: 1,
            samples: 10,
            ..CtmConfig::default()
        };
        let fit = fit_ctm(&docs, beta, &mu, &sigma, &cfg).unwrap();
        for q in &fit.q {
            let kl = kl_gaussian(&q.mean, &q.covariance().unwrap(), &mu, &sigma).unwrap();
            assert!(kl.abs() < 1e-10, "{kl}");
        }
    }

    #[test]
    fn zero_passes_returns_prior() {
        let c = synthetic_corpus(3, 10, 4, 20, 1).unwrap();
        let cfg = CtmConfig {
            passes: 0,
            ..CtmConfig::default()
        };
        let fit = fit_ctm(&c.docs, Arc::new(c.topic_word), &c.prior_mean, &c.prior_cov, &cfg).unwrap();
        assert_eq!(fit.trace.rows.len(), 1);
        for q in &fit.q {
            assert_eq!(q.mean, c.prior_mean);
            assert!((q.covariance().unwrap().as_matrix() - c.prior_cov.as_matrix()).amax() < 1e-12);
        }
    }

    #[test]
    fn mean_field_keeps_diagonal_covariance() {
        let c = synthetic_corpus(3, 10, 4, 20, 2).unwrap();
        let cfg = CtmConfig {
            variant: CtmVariant::MeanField,
            passes: 3,
            beta_step: 0.05,
            ..CtmConfig::default()
        };
        let fit = fit_ctm(&c.docs, Arc::new(c.topic_word), &c.prior_mean, &c.prior_cov, &cfg).unwrap();
        for q in &fit.q {
            let v = q.covariance().unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        assert!(v.get(i, j).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn single_topic_heldout_is_exact() {
        let beta = DMatrix::from_column_slice(3, 1, &[0.2, 0.3, 0.5]);
        let (mu, sigma) = prior(1);
        let q = GaussianVariational::full(mu, sigma).unwrap();
        let y = Document::new(vec![(0, 2), (2, 1)]).unwrap();
        let got = heldout_loglik(&q, &beta, &y, 100, 1).unwrap();
        let want = (2.0 * 0.2f64.ln() + 0.5f64.ln()) / 3.0;
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn uniform_topics_give_minus_log_vocab() {
        let n = 8;
        let beta = DMatrix::from_element(n, 3, 1.0 / n as f64);
        let (mu, sigma) = prior(3);
        let q = GaussianVariational::full(mu, sigma).unwrap();
        let y = Document::new(vec![(1, 4), (6, 2)]).unwrap();
        let got = heldout_loglik(&q, &beta, &y, 200, 3).unwrap();
        assert!((got + (n as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn point_mass_matches_direct_mixture() {
        let c = synthetic_corpus(3, 10, 1, 10, 5).unwrap();
        let m = DVector::from_column_slice(&[0.4, -0.2, 0.1]);
        let q = GaussianVariational::full(m.clone(), SymmetricMatrix::from_diagonal(&[1e-12; 3]).unwrap()).unwrap();
        let y = Document::new(vec![(0, 1), (4, 3), (9, 2)]).unwrap();
        let got = heldout_loglik(&q, &c.topic_word, &y, 100, 2).unwrap();
        let theta = softmax(&m);
        let want: f64 = y
            .words
            .iter()
            .map(|&(w, cnt)| f64::from(cnt) * c.topic_word.row(w).transpose().dot(&theta).ln())
            .sum::<f64>()
            / 6.0;
        assert!((got - want).abs() < 1e-3);
    }

    #[test]
    fn heldout_rejects_empty_half_and_few_samples() {
        let beta = DMatrix::from_column_slice(2, 1, &[0.5, 0.5]);
        let q = GaussianVariational::full(DVector::zeros(1), SymmetricMatrix::identity(1)).unwrap();
        assert!(heldout_loglik(&q, &beta, &Document::default(), 100, 0).is_err());
        assert!(heldout_loglik(&q, &beta, &Document::new(vec![(0, 1)]).unwrap(), 99, 0).is_err());
    }

    #[test]
    fn heldout_is_permutation_invariant() {
        let c = synthetic_corpus(3, 6, 1, 10, 7).unwrap();
        let (mu, sigma) = prior(3);
        let q = GaussianVariational::full(mu, sigma).unwrap();
        let y = Document::new(vec![(0, 1), (2, 2), (5, 1)]).unwrap();
        let perm = [3, 5, 0, 1, 4, 2];
        let mut beta_p = DMatrix::zeros(6, 3);
        for (i, &p) in perm.iter().enumerate() {
            beta_p.set_row(p, &c.topic_word.row(i));
        }
        let y_p = Document::new(y.words.iter().map(|&(w, n)| (perm[w], n)).collect()).unwrap();
        let a = heldout_loglik(&q, &c.topic_word, &y, 500, 4).unwrap();
        let b = heldout_loglik(&q, &beta_p, &y_p, 500, 4).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(a <= 0.0);
    }
}
