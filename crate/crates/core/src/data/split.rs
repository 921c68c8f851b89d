use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, GradeRecord, Split};
use crate::backbone::NUM_GRADES;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub test: f64,
    pub val: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 7.0,
            test: 2.0,
            val: 1.0,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, test: f64, val: f64) -> Result<Self> {
        let r = Self { train, test, val };
        let parts = r.parts();
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) || parts.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config(format!("invalid split ratios {train}:{test}:{val}")));
        }
        Ok(r)
    }

    /// `train:test:val`, e.g. `7:2:1`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<f64> = text
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::config(format!("split ratios `{text}` are not numbers")))?;
        match parts[..] {
            [a, b, c] => Self::new(a, b, c),
            _ => Err(Error::config(format!("split ratios `{text}` need three parts"))),
        }
    }

    fn parts(&self) -> [f64; 3] {
        [self.train, self.test, self.val]
    }

    /// Largest-remainder allocation of `n` items; ties go to the earlier
    /// split (train, then test, then val).
    pub fn allocate(&self, n: usize) -> [usize; 3] {
        let parts = self.parts();
        let total: f64 = parts.iter().sum();
        let exact = parts.map(|p| n as f64 * p / total);
        let mut out = exact.map(|e| e.floor() as usize);
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| {
            let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        let short = n - out.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            out[i] += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SplitOptions {
    /// Keep every record of a patient in the same split.
    pub group_by_patient: bool,
    /// Fail instead of warning when a grade has no records.
    pub strict: bool,
}

/// Per-grade proportional split with largest-remainder rounding.
///
/// Within each grade the units (records, or patients when grouping) are
/// sorted by path, shuffled with `seed`, and dealt out train → test → val,
/// so membership depends only on the record set and the seed, never on
/// input order. Output keeps the input record order.
pub fn stratified_split(
    records: &[GradeRecord],
    ratios: SplitRatios,
    seed: u64,
    opts: SplitOptions,
) -> Result<DatasetManifest> {
    // Unit = list of record indices sharing a split.
    let mut units: Vec<Vec<usize>> = if opts.group_by_patient {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        let mut singles = Vec::new();
        for (i, r) in records.iter().enumerate() {
            match r.patient_id.as_deref() {
                Some(p) => groups.entry(p).or_default().push(i),
                None => singles.push(vec![i]),
            }
        }
        groups.into_values().chain(singles).collect()
    } else {
        (0..records.len()).map(|i| vec![i]).collect()
    };
    for u in &mut units {
        u.sort_by(|&a, &b| records[a].path.cmp(&records[b].path));
    }

    // A group is stratified by its highest grade.
    let mut by_grade: Vec<Vec<Vec<usize>>> = vec![Vec::new(); NUM_GRADES];
    for u in units.drain(..) {
        let g = u.iter().map(|&i| records[i].grade).max().unwrap_or(0);
        if g >= NUM_GRADES {
            return Err(Error::input(format!("grade {g} out of range")));
        }
        by_grade[g].push(u);
    }

    let mut assignment = vec![Split::Train; records.len()];
    for (grade, mut group) in by_grade.into_iter().enumerate() {
        if group.is_empty() {
            let msg = format!("grade {grade} has no records");
            if opts.strict {
                return Err(Error::Stratification(msg));
            }
            log::warn!("{msg}; continuing");
            continue;
        }
        group.sort_by(|a, b| records[a[0]].path.cmp(&records[b[0]].path));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(grade as u64);
        group.shuffle(&mut rng);
        let sizes = ratios.allocate(group.len());
        let mut it = group.into_iter();
        for (split, &n) in Split::ALL.iter().zip(&sizes) {
            for unit in it.by_ref().take(n) {
                for i in unit {
                    assignment[i] = *split;
                }
            }
        }
    }

    let out = records
        .iter()
        .zip(assignment)
        .map(|(r, s)| GradeRecord {
            split: Some(s),
            ..r.clone()
        })
        .collect();
    DatasetManifest::new(out)
}
