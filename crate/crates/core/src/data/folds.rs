use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LabeledImage;
use crate::error::{invalid, Error, Result};

/// Assignment of every subject to exactly one of `k` folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSpec {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSpec {
    pub fn subjects_in(&self, fold: usize) -> BTreeSet<&str> {
        self.assignments.iter().filter(|(_, &f)| f == fold).map(|(s, _)| s.as_str()).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// `(train, test)` image indices for `fold`. Fails if an image's subject
    /// has no fold assignment.
    pub fn split(&self, images: &[LabeledImage], fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if fold >= self.k {
            return Err(invalid(format!("fold {fold} out of range for k={}", self.k)));
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, img) in images.iter().enumerate() {
            match self.assignments.get(&img.subject_id) {
                Some(&f) if f == fold => test.push(i),
                Some(_) => train.push(i),
                None => return Err(invalid(format!("subject `{}` has no fold", img.subject_id))),
            }
        }
        Ok((train, test))
    }

    /// Tab-separated `subject_id<TAB>fold_index` table with a header line.
    pub fn to_table(&self) -> String {
        let mut out = format!("# k={}\nsubject_id\tfold_index\n", self.k);
        for (s, f) in &self.assignments {
            writeln!(out, "{s}\t{f}").unwrap();
        }
        out
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let mut k = None;
        let mut assignments = BTreeMap::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# k=") {
                k = Some(rest.trim().parse().map_err(|_| Error::Format("bad fold count".into()))?);
                continue;
            }
            if line.is_empty() || line.starts_with("subject_id") {
                continue;
            }
            let (s, f) = line.split_once('\t').ok_or_else(|| Error::Format(format!("bad fold row `{line}`")))?;
            let f: usize = f.trim().parse().map_err(|_| Error::Format(format!("bad fold index `{f}`")))?;
            assignments.insert(s.to_string(), f);
        }
        let k = k.ok_or_else(|| Error::Format("missing `# k=` header".into()))?;
        if assignments.values().any(|&f| f >= k) {
            return Err(Error::Format("fold index out of range".into()));
        }
        Ok(Self { k, assignments })
    }
}

/// Shuffles the distinct subjects with `seed` and deals them round-robin into
/// `k` folds, so fold sizes differ by at most one.
pub fn make_folds(dataset: &[LabeledImage], k: usize, seed: u64) -> Result<FoldSpec> {
    let subjects: BTreeSet<&str> = dataset.iter().map(|i| i.subject_id.as_str()).collect();
    if k < 2 {
        return Err(invalid("need at least 2 folds"));
    }
    if subjects.len() < k {
        return Err(invalid(format!("{} subjects cannot fill {k} folds", subjects.len())));
    }
    let mut order: Vec<&str> = subjects.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignments = order.into_iter().enumerate().map(|(i, s)| (s.to_string(), i % k)).collect();
    Ok(FoldSpec { k, assignments })
}
