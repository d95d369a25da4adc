//! Dataset-directory loading for the training and evaluation commands.
//!
//! A data directory contains `corpus.tsv`, `vocab.txt`, `features/*.feat`,
//! and the split manifests `split_train.txt` / `split_val.txt` /
//! `split_test.txt`.

use std::collections::BTreeMap;
use std::path::Path;

use super::CliError;
use crate::corpus::{load_corpus, load_features, load_split, FeatureSet, Report, Vocabulary};

pub struct LoadedData {
    pub vocab: Vocabulary,
    pub train: Vec<(FeatureSet, Report)>,
    pub val: Vec<(FeatureSet, Report)>,
    pub test: Vec<(FeatureSet, Report)>,
    pub feature_dim: usize,
    pub n_regions: usize,
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

pub fn load_data(dir: &Path) -> Result<LoadedData, CliError> {
    let vocab = Vocabulary::load(&dir.join("vocab.txt")).map_err(data_err)?;
    let records = load_corpus(&dir.join("corpus.tsv")).map_err(data_err)?;
    let by_id: BTreeMap<String, String> = records.into_iter().collect();

    let load_items = |split: &str| -> Result<Vec<(FeatureSet, Report)>, CliError> {
        let ids = load_split(&dir.join(format!("split_{}.txt", split))).map_err(data_err)?;
        let mut items = Vec::with_capacity(ids.len());
        for id in ids {
            let text = by_id
                .get(&id)
                .ok_or_else(|| CliError::Data(format!("image {} missing from corpus.tsv", id)))?;
            let features =
                load_features(&dir.join("features").join(format!("{}.feat", id))).map_err(data_err)?;
            items.push((features, Report::from_text(&id, text, &vocab)));
        }
        Ok(items)
    };

    let train = load_items("train")?;
    let val = load_items("val")?;
    let test = load_items("test")?;
    let probe = train
        .first()
        .or(val.first())
        .or(test.first())
        .ok_or_else(|| CliError::Data("dataset has no items".into()))?;
    let feature_dim = probe.0.dim;
    let n_regions = probe.0.n_regions;
    for (f, _) in train.iter().chain(val.iter()).chain(test.iter()) {
        if f.dim != feature_dim {
            return Err(CliError::Data(format!(
                "feature dim mismatch: {} has {}, expected {}",
                f.image_id, f.dim, feature_dim
            )));
        }
    }
    Ok(LoadedData {
        vocab,
        train,
        val,
        test,
        feature_dim,
        n_regions,
    })
}

/// Order-preserving parallel map over items with at most `threads` workers.
/// Results are assembled in input order, so the output is independent of
/// the worker count.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for (slot_chunk, item_chunk) in slots.chunks_mut(chunk).zip(items.chunks(chunk)) {
            let f = &f;
            scope.spawn(move || {
                for (slot, item) in slot_chunk.iter_mut().zip(item_chunk.iter()) {
                    *slot = Some(f(item));
                }
            });
        }
    });
    slots.into_iter().map(|r| r.unwrap()).collect()
}
