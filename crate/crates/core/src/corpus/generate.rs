use std::time::Duration;

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use rayon::prelude::*;

use super::{ClassCatalog, Description, DescriptionCorpus, LanguageModelClient, Query};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GenerationOptions {
    /// Extra attempts after a transport failure.
    pub retries: usize,
    /// Upper bound on concurrently outstanding queries.
    pub max_in_flight: usize,
    /// Completions requested per query.
    pub samples_per_query: usize,
    /// Sleep before retry `n` is `backoff * n`.
    pub backoff: Duration,
    /// Pins the corpus timestamp (reproducible fixtures); defaults to now.
    pub created_at: Option<DateTime<Utc>>,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            retries: 2,
            max_in_flight: 4,
            samples_per_query: 1,
            backoff: Duration::from_millis(500),
            created_at: None,
        }
    }
}

/// A query/sample whose completion came back empty and was dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedQuery {
    pub label: String,
    pub template_id: String,
    pub query: String,
    pub sample: usize,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub corpus: DescriptionCorpus,
    pub skipped: Vec<SkippedQuery>,
}

fn complete_with_retries(
    llm: &dyn LanguageModelClient,
    query: &str,
    sample: usize,
    opts: &GenerationOptions,
) -> Result<String> {
    let mut attempt = 0;
    loop {
        match llm.complete_sample(query, sample) {
            Ok(text) => return Ok(text),
            Err(Error::Transport(msg)) if attempt < opts.retries => {
                attempt += 1;
                log::debug!("retrying {query:?} (attempt {attempt}): {msg}");
                if !opts.backoff.is_zero() {
                    std::thread::sleep(opts.backoff * attempt as u32);
                }
            }
            Err(Error::Transport(msg)) => {
                return Err(Error::Transport(format!(
                    "{msg} (gave up after {} attempts)",
                    attempt + 1
                )))
            }
            Err(other) => return Err(other),
        }
    }
}

/// Sends every query to `llm` and assembles the description corpus.
///
/// Empty completions are skipped with a warning; a transport failure that
/// survives all retries aborts generation. A class left without any
/// description yields [`Error::CorpusIncomplete`].
pub fn generate_descriptions(
    catalog: &ClassCatalog,
    queries: &[Query],
    llm: &dyn LanguageModelClient,
    opts: &GenerationOptions,
) -> Result<Generated> {
    if let Some(q) = queries
        .iter()
        .find(|q| catalog.index_of(&q.label).is_none())
    {
        return Err(Error::validation(format!(
            "query label {:?} is not in catalog {:?}",
            q.label,
            catalog.dataset_id()
        )));
    }
    let jobs: Vec<(&Query, usize)> = queries
        .iter()
        .flat_map(|q| (0..opts.samples_per_query.max(1)).map(move |s| (q, s)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.max_in_flight.max(1))
        .build()
        .map_err(|e| Error::Transport(format!("cannot start generation workers: {e}")))?;
    let results: Vec<Result<String>> = pool.install(|| {
        jobs.par_iter()
            .map(|(q, sample)| complete_with_retries(llm, &q.text, *sample, opts))
            .collect()
    });

    let mut entries: IndexMap<String, Vec<Description>> = catalog
        .labels()
        .iter()
        .map(|l| (l.clone(), Vec::new()))
        .collect();
    let mut skipped = Vec::new();
    for ((query, sample), result) in jobs.into_iter().zip(results) {
        let text = result?;
        let text = text.trim();
        if text.is_empty() {
            log::warn!(
                "empty completion for {:?} (class {:?}, sample {sample}); skipping",
                query.text,
                query.label
            );
            skipped.push(SkippedQuery {
                label: query.label.clone(),
                template_id: query.template_id.clone(),
                query: query.text.clone(),
                sample,
            });
            continue;
        }
        entries[query.label.as_str()].push(Description {
            template_id: query.template_id.clone(),
            text: text.to_string(),
        });
    }

    let corpus = DescriptionCorpus::new(
        catalog.clone(),
        entries,
        llm.model_id(),
        opts.created_at.unwrap_or_else(Utc::now),
    )?;
    Ok(Generated { corpus, skipped })
}
