//! `ctm-fit` and `ctm-eval`: plain-text corpus, topic and posterior files.
//!
//! A posterior file holds `K D` on its first line, then one line per
//! document: the `K` means followed by the `K × K` covariance, row-major.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use nalgebra::{DMatrix, DVector};

use proxvi::ctm::{
    corpus_heldout_loglik, fit_ctm, prior_as_posterior, read_corpus, read_topic_word, split_corpus, synthetic_corpus,
    write_corpus, write_topic_word, CtmConfig, CtmTrace, CtmVariant, Document,
};
use proxvi::linalg::SymmetricMatrix;
use proxvi::models::GaussianVariational;
use proxvi::solver::RunStatus;

#[derive(Args)]
pub struct CtmFitArgs {
    /// Corpus file: `N_vocab K` header, then `word:count ...` per document.
    #[arg(long, required_unless_present = "synthetic")]
    corpus: Option<PathBuf>,
    /// Headerless `N_vocab × K` topic-word CSV.
    #[arg(long, required_unless_present = "synthetic")]
    topic_word: Option<PathBuf>,
    /// Headerless `K × K` prior covariance CSV; identity if absent. The prior mean is zero.
    #[arg(long)]
    prior_cov: Option<PathBuf>,
    /// Generate a corpus instead: `topics,vocab,docs,words_per_doc`.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["corpus", "topic_word"])]
    synthetic: Option<Vec<usize>>,
    /// Hold out this fraction of documents, fit on the first half of each and
    /// write the second halves to `heldout.txt`.
    #[arg(long)]
    heldout_fraction: Option<f64>,
    #[arg(long, default_value_t = 0.001)]
    beta_step: f64,
    /// Documents per mini-batch.
    #[arg(long, default_value_t = 2)]
    minibatch: usize,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    passes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Diagonal `V` per document.
    #[arg(long)]
    mean_field: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct CtmEvalArgs {
    /// Posterior file written by `ctm-fit`.
    #[arg(long)]
    q: PathBuf,
    /// Held-out halves, one per posterior.
    #[arg(long)]
    heldout: PathBuf,
    #[arg(long)]
    topic_word: PathBuf,
    /// Also report the prior-as-posterior reference under this covariance.
    #[arg(long)]
    prior_cov: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|t| t.trim().parse::<f64>().with_context(|| format!("{}:{}: bad number '{t}'", path.display(), i + 1)))
                .collect()
        })
        .collect::<Result<_>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    ensure!(rows.iter().all(|r| r.len() == cols), "{}: rows have unequal lengths", path.display());
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut s = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(s, "{}", cells.join(","))?;
    }
    fs::write(path, s)?;
    Ok(())
}

fn prior_cov(path: Option<&Path>, k: usize) -> Result<SymmetricMatrix> {
    match path {
        Some(p) => {
            let m = read_matrix_csv(p)?;
            ensure!(m.nrows() == k && m.ncols() == k, "prior covariance must be {k} × {k}");
            Ok(SymmetricMatrix::from_upper(m)?)
        }
        None => Ok(SymmetricMatrix::identity(k)),
    }
}

fn write_posterior(path: &Path, qs: &[GaussianVariational]) -> Result<()> {
    let k = qs.first().map_or(0, GaussianVariational::dim);
    let mut s = format!("{k} {}\n", qs.len());
    for q in qs {
        let v = q.covariance()?;
        let mut cells: Vec<String> = q.mean.iter().map(f64::to_string).collect();
        for i in 0..k {
            for j in 0..k {
                cells.push(v.get(i, j).to_string());
            }
        }
        writeln!(s, "{}", cells.join(" "))?;
    }
    fs::write(path, s)?;
    Ok(())
}

fn read_posterior(path: &Path) -> Result<Vec<GaussianVariational>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty posterior file")?;
    let dims: Vec<usize> = header.split_whitespace().map(str::parse).collect::<Result<_, _>>()?;
    let [k, d] = dims[..] else {
        bail!("{}: header must be 'K D'", path.display());
    };
    let mut qs = Vec::with_capacity(d);
    for (i, line) in lines.enumerate() {
        let vals: Vec<f64> = line.split_whitespace().map(str::parse).collect::<Result<_, _>>()?;
        ensure!(vals.len() == k + k * k, "{}:{}: expected {} values", path.display(), i + 2, k + k * k);
        let mean = DVector::from_column_slice(&vals[..k]);
        let v = DMatrix::from_row_slice(k, k, &vals[k..]);
        qs.push(GaussianVariational::full(mean, SymmetricMatrix::from_upper(v)?)?);
    }
    ensure!(qs.len() == d, "{}: expected {d} documents, found {}", path.display(), qs.len());
    Ok(qs)
}

fn write_trace(path: &Path, trace: &CtmTrace) -> Result<()> {
    let mut s = String::from("pass,iteration,elbo,elbo_std_error,elbo_moving_average,wall_ms\n");
    for r in &trace.rows {
        writeln!(s, "{},{},{},{},{},{}", r.pass, r.iteration, r.elbo, r.elbo_std_error, r.elbo_moving_average, r.wall_ms)?;
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn fit(a: CtmFitArgs) -> Result<ExitCode> {
    fs::create_dir_all(&a.out)?;
    let (topic_word, cov, docs, n_vocab) = match &a.synthetic {
        Some(p) => {
            ensure!(p.len() == 4, "--synthetic takes topics,vocab,docs,words_per_doc");
            let c = synthetic_corpus(p[0], p[1], p[2], p[3], a.seed)?;
            write_corpus(&a.out.join("corpus.txt"), p[1], p[0], &c.docs)?;
            write_topic_word(&a.out.join("topic_word.csv"), &c.topic_word)?;
            write_matrix_csv(&a.out.join("prior_cov.csv"), c.prior_cov.as_matrix())?;
            (c.topic_word, c.prior_cov, c.docs, p[1])
        }
        None => {
            let corpus = a.corpus.as_deref().context("--corpus is required")?;
            let (n_vocab, k, docs) = read_corpus(corpus)?;
            let tw = read_topic_word(a.topic_word.as_deref().context("--topic-word is required")?)?;
            ensure!(tw.ncols() == k && tw.nrows() == n_vocab, "topic-word matrix must be {n_vocab} × {k}");
            (tw, prior_cov(a.prior_cov.as_deref(), k)?, docs, n_vocab)
        }
    };
    let k = topic_word.ncols();
    let fit_docs: Vec<Document> = match a.heldout_fraction {
        Some(f) => {
            let split = split_corpus(&docs, f, a.seed)?;
            let held: Vec<Document> = split.halves.iter().map(|h| h.1.clone()).collect();
            write_corpus(&a.out.join("heldout.txt"), n_vocab, k, &held)?;
            split.halves.into_iter().map(|h| h.0).collect()
        }
        None => docs,
    };
    let cfg = CtmConfig {
        variant: if a.mean_field { CtmVariant::MeanField } else { CtmVariant::Full },
        beta_step: a.beta_step,
        docs_per_batch: a.minibatch,
        samples: a.samples,
        seed: a.seed,
        passes: a.passes,
        ..CtmConfig::default()
    };
    let mean = DVector::zeros(k);
    let fit = fit_ctm(&fit_docs, Arc::new(topic_word), &mean, &cov, &cfg)?;
    write_posterior(&a.out.join("q.txt"), &fit.q)?;
    write_trace(&a.out.join("trace.csv"), &fit.trace)?;
    let snapshot = format!(
        "variant={:?}\nbeta_step={}\ndocs_per_batch={}\nsamples={}\nseed={}\npasses={}\nmoving_average={}\nsynthetic={}\ncorpus={}\nheldout_fraction={}\n",
        cfg.variant,
        cfg.beta_step,
        cfg.docs_per_batch,
        cfg.samples,
        cfg.seed,
        cfg.passes,
        cfg.moving_average,
        a.synthetic.as_ref().map(|p| format!("{p:?}")).unwrap_or_default(),
        a.corpus.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        a.heldout_fraction.map(|f| f.to_string()).unwrap_or_default(),
    );
    fs::write(a.out.join("config.txt"), snapshot)?;
    let last = fit.trace.rows.last();
    println!(
        "{:?} after {} passes, moving-average ELBO {:.4}",
        fit.trace.status,
        last.map_or(0, |r| r.pass),
        last.map_or(f64::NAN, |r| r.elbo_moving_average)
    );
    Ok(match fit.trace.status {
        RunStatus::Diverged => ExitCode::from(crate::EXIT_DIVERGED),
        _ => ExitCode::SUCCESS,
    })
}

pub fn eval(a: CtmEvalArgs) -> Result<ExitCode> {
    let qs = read_posterior(&a.q)?;
    let (_, _, held) = read_corpus(&a.heldout)?;
    let tw = read_topic_word(&a.topic_word)?;
    let fitted = corpus_heldout_loglik(&qs, &tw, &held, a.samples, a.seed)?;
    println!("held-out log-likelihood per word: {fitted:.6}");
    if let Some(p) = &a.prior_cov {
        let k = tw.ncols();
        let prior = prior_as_posterior(&DVector::zeros(k), &prior_cov(Some(p), k)?, held.len())?;
        let base = corpus_heldout_loglik(&prior, &tw, &held, a.samples, a.seed)?;
        println!("prior-as-posterior:               {base:.6}");
        println!("margin:                           {:.6}", fitted - base);
    }
    Ok(ExitCode::SUCCESS)
}
