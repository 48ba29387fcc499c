//! Hard Dice over tumour regions and per-subject reports.

use std::fmt::Write as _;

use crate::arch::Network;
use crate::data::{label, Sample, Standardizer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::training::Checkpoint;

/// Named label sets scored separately.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    regions: Vec<(String, Vec<u8>)>,
}

impl Default for RegionMap {
    /// whole = {2, 3, 4, 5}, core = {2, 4, 5}, active = {5}.
    fn default() -> Self {
        use label::*;
        RegionMap {
            regions: vec![
                ("whole".into(), vec![NECROTIC, EDEMA, NON_ENHANCING, ENHANCING]),
                ("core".into(), vec![NECROTIC, NON_ENHANCING, ENHANCING]),
                ("active".into(), vec![ENHANCING]),
            ],
        }
    }
}

impl RegionMap {
    pub fn new(regions: Vec<(String, Vec<u8>)>) -> Result<Self> {
        for (name, set) in &regions {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::invalid(format!("bad region name `{name}`")));
            }
            if let Some(l) = set.iter().find(|&&l| l as usize >= label::COUNT) {
                return Err(Error::invalid(format!("region `{name}` has out-of-range label {l}")));
            }
        }
        let map = RegionMap { regions };
        let subset = |a: &str, b: &str| match (map.get(a), map.get(b)) {
            (Some(x), Some(y)) => x.iter().all(|l| y.contains(l)),
            _ => true,
        };
        if !subset("active", "core") || !subset("core", "whole") {
            return Err(Error::invalid("regions must nest as active ⊆ core ⊆ whole"));
        }
        Ok(map)
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.regions.iter().find(|(n, _)| n == name).map(|(_, s)| s.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.regions.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[u8])> {
        self.regions.iter().map(|(n, s)| (n.as_str(), s.as_slice()))
    }
}

/// `2 |A ∩ B| / (|A| + |B|)` with `A`, `B` the voxels whose label is in
/// `region`; 1 when both are empty.
pub fn dice_region(prediction: &[u8], truth: &[u8], region: &[u8]) -> Result<f64> {
    if prediction.len() != truth.len() {
        return Err(Error::invalid(format!(
            "prediction has {} voxels, truth {}",
            prediction.len(),
            truth.len()
        )));
    }
    let mut member = [false; 256];
    for &l in region {
        member[l as usize] = true;
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in prediction.iter().zip(truth) {
        let (ip, it) = (member[p as usize], member[t as usize]);
        a += ip as usize;
        b += it as usize;
        both += (ip && it) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Anything that labels an `(n, D, H, W)` image.
pub trait Segmenter {
    fn n_modalities(&self) -> usize;
    fn segment(&self, image: &Tensor) -> Result<Vec<u8>>;
}

impl Segmenter for Network {
    fn n_modalities(&self) -> usize {
        self.arch().n_modalities
    }

    fn segment(&self, image: &Tensor) -> Result<Vec<u8>> {
        self.predict(image)
    }
}

/// A network preceded by the intensity standardisation it was trained with.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub network: Network,
    pub standardizer: Option<Standardizer>,
}

impl Pipeline {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Pipeline {
            network: ckpt.network()?,
            standardizer: ckpt.standardizer.clone(),
        })
    }
}

impl Segmenter for Pipeline {
    fn n_modalities(&self) -> usize {
        self.network.arch().n_modalities
    }

    fn segment(&self, image: &Tensor) -> Result<Vec<u8>> {
        match &self.standardizer {
            None => self.network.predict(image),
            Some(st) => {
                let v = image.numel() / image.shape()[0];
                let s = Sample::new(image.clone(), vec![0; v])?;
                self.network.predict(st.transform(&s)?.image())
            }
        }
    }
}

/// Per-subject Dice for every region, as fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    regions: Vec<String>,
    subjects: Vec<String>,
    /// `scores[subject][region]`.
    scores: Vec<Vec<f64>>,
}

impl DiceReport {
    pub fn new(regions: Vec<String>, subjects: Vec<String>, scores: Vec<Vec<f64>>) -> Result<Self> {
        if scores.len() != subjects.len() || scores.iter().any(|r| r.len() != regions.len()) {
            return Err(Error::invalid("report table does not match its subjects and regions"));
        }
        if let Some(v) = scores.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("Dice {v} outside [0, 1]")));
        }
        Ok(DiceReport {
            regions,
            subjects,
            scores,
        })
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    /// Scores of one region in subject order.
    pub fn column(&self, region: &str) -> Option<Vec<f64>> {
        let j = self.regions.iter().position(|r| r == region)?;
        Some(self.scores.iter().map(|row| row[j]).collect())
    }

    pub fn mean(&self, region: &str) -> Option<f64> {
        let c = self.column(region)?;
        Some(c.iter().sum::<f64>() / c.len() as f64)
    }

    /// Population standard deviation over subjects.
    pub fn std(&self, region: &str) -> Option<f64> {
        let c = self.column(region)?;
        let m = self.mean(region)?;
        Some((c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / c.len() as f64).sqrt())
    }

    /// `subject\tregion\tdice` lines with Dice in percent, then
    /// `# mean region value` and `# std region value` footers in percent with
    /// one decimal.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (subject, row) in self.subjects.iter().zip(&self.scores) {
            for (region, v) in self.regions.iter().zip(row) {
                writeln!(s, "{subject}\t{region}\t{:.6}", 100.0 * v).expect("string write");
            }
        }
        if !self.subjects.is_empty() {
            for (tag, f) in [
                ("mean", Self::mean as fn(&Self, &str) -> Option<f64>),
                ("std", Self::std),
            ] {
                for r in &self.regions {
                    writeln!(s, "# {tag}\t{r}\t{:.1}", 100.0 * f(self, r).expect("known region"))
                        .expect("string write");
                }
            }
        }
        s
    }

    /// Parses the body lines of [`DiceReport::to_tsv`]; footers are recomputed.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut regions: Vec<String> = Vec::new();
        let mut subjects: Vec<String> = Vec::new();
        let mut cells: Vec<(usize, usize, f64)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::invalid(format!("report line {}: {msg}", i + 1));
            let f: Vec<&str> = line.split('\t').collect();
            let [subject, region, value] = f[..] else {
                return Err(bad("expected `subject<TAB>region<TAB>dice`"));
            };
            let v: f64 = value.parse().map_err(|_| bad("Dice is not a number"))?;
            let si = subjects.iter().position(|s| s == subject).unwrap_or_else(|| {
                subjects.push(subject.to_string());
                subjects.len() - 1
            });
            let ri = regions.iter().position(|r| r == region).unwrap_or_else(|| {
                regions.push(region.to_string());
                regions.len() - 1
            });
            cells.push((si, ri, v / 100.0));
        }
        let mut scores = vec![vec![f64::NAN; regions.len()]; subjects.len()];
        for (si, ri, v) in cells {
            if !scores[si][ri].is_nan() {
                return Err(Error::invalid(format!(
                    "duplicate entry {} {}",
                    subjects[si], regions[ri]
                )));
            }
            scores[si][ri] = v;
        }
        if scores.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::invalid("report is missing some subject/region entries"));
        }
        // percent values round-trip through fractions with tiny error
        for v in scores.iter_mut().flatten() {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(regions, subjects, scores)
    }
}

/// Segments every sample and scores each region.
pub fn evaluate(model: &impl Segmenter, samples: &[(String, Sample)], regions: &RegionMap) -> Result<DiceReport> {
    let mut scores = Vec::with_capacity(samples.len());
    for (name, s) in samples {
        if s.modalities() != model.n_modalities() {
            return Err(Error::invalid(format!(
                "model expects {} modalities, subject {name} has {}",
                model.n_modalities(),
                s.modalities()
            )));
        }
        let pred = model.segment(s.image())?;
        scores.push(
            regions
                .iter()
                .map(|(_, set)| dice_region(&pred, s.labels(), set))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    DiceReport::new(
        regions.names().map(String::from).collect(),
        samples.iter().map(|(n, _)| n.clone()).collect(),
        scores,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Oracle<'a>(&'a [(String, Sample)]);

    impl Segmenter for Oracle<'_> {
        fn n_modalities(&self) -> usize {
            self.0[0].1.modalities()
        }
        fn segment(&self, image: &Tensor) -> Result<Vec<u8>> {
            Ok(self
                .0
                .iter()
                .find(|(_, s)| s.image() == image)
                .unwrap()
                .1
                .labels()
                .to_vec())
        }
    }

    struct Background(usize);

    impl Segmenter for Background {
        fn n_modalities(&self) -> usize {
            self.0
        }
        fn segment(&self, image: &Tensor) -> Result<Vec<u8>> {
            Ok(vec![0; image.numel() / image.shape()[0]])
        }
    }

    fn phantoms(k: u64) -> Vec<(String, Sample)> {
        (0..k)
            .map(|s| {
                (
                    format!("s{s}"),
                    crate::data::generate_phantom([16, 16, 16], 2, s).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn dice_basics() {
        assert_eq!(dice_region(&[1, 2, 0], &[1, 2, 0], &[2]).unwrap(), 1.0);
        assert_eq!(dice_region(&[5, 5, 0, 0], &[5, 0, 5, 0], &[5]).unwrap(), 0.5);
        assert_eq!(dice_region(&[5, 0], &[0, 0], &[5]).unwrap(), 0.0);
        assert_eq!(dice_region(&[0, 0], &[0, 0], &[5]).unwrap(), 1.0);
        assert!(dice_region(&[0], &[0, 0], &[5]).is_err());
    }

    #[test]
    fn default_regions_nest() {
        let r = RegionMap::default();
        assert_eq!(r.names().collect::<Vec<_>>(), ["whole", "core", "active"]);
        assert!(RegionMap::new(vec![("core".into(), vec![2]), ("active".into(), vec![5])]).is_err());
        assert!(RegionMap::new(vec![("x".into(), vec![6])]).is_err());
    }

    #[test]
    fn oracle_scores_full_marks() {
        let data = phantoms(3);
        let rep = evaluate(&Oracle(&data), &data, &RegionMap::default()).unwrap();
        for r in ["whole", "core", "active"] {
            assert_eq!(rep.mean(r), Some(1.0));
            assert_eq!(rep.std(r), Some(0.0));
        }
        assert!(rep.to_tsv().contains("# mean\twhole\t100.0"));
    }

    #[test]
    fn background_predictor_scores_zero() {
        let data = phantoms(2);
        let rep = evaluate(&Background(2), &data, &RegionMap::default()).unwrap();
        for r in ["whole", "core", "active"] {
            assert_eq!(rep.mean(r), Some(0.0));
        }
        assert!(evaluate(&Background(3), &data, &RegionMap::default()).is_err());
    }

    #[test]
    fn hand_computed_toy_report() {
        // three subjects, one region, two voxels each
        let regions = RegionMap::new(vec![("active".into(), vec![5])]).unwrap();
        let truth = [vec![5u8, 5], vec![5, 0], vec![0, 0]];
        let preds = [vec![5u8, 0], vec![5, 0], vec![5, 0]];
        // Dice: 2/3, 1, 0 -> mean 5/9, population std sqrt(((1/9)^2 + (4/9)^2 + (5/9)^2) / 3)
        let scores: Vec<Vec<f64>> = truth
            .iter()
            .zip(&preds)
            .map(|(t, p)| vec![dice_region(p, t, regions.get("active").unwrap()).unwrap()])
            .collect();
        let rep = DiceReport::new(vec!["active".into()], vec!["a".into(), "b".into(), "c".into()], scores).unwrap();
        assert!((rep.mean("active").unwrap() - 5.0 / 9.0).abs() < 1e-15);
        let std = ((1.0f64 / 81.0 + 16.0 / 81.0 + 25.0 / 81.0) / 3.0).sqrt();
        assert!((rep.std("active").unwrap() - std).abs() < 1e-15);
        let tsv = rep.to_tsv();
        assert!(tsv.contains("# mean\tactive\t55.6\n"));
        assert!(tsv.contains("# std\tactive\t41.6\n"));
    }

    #[test]
    fn tsv_round_trip() {
        let rep = DiceReport::new(
            vec!["whole".into(), "core".into()],
            vec!["x".into(), "y".into()],
            vec![vec![0.5, 0.25], vec![1.0, 0.125]],
        )
        .unwrap();
        assert_eq!(DiceReport::from_tsv(&rep.to_tsv()).unwrap(), rep);
        assert!(DiceReport::from_tsv("x\twhole\n").is_err());
        assert!(DiceReport::from_tsv("x\twhole\t50\nx\twhole\t40\n").is_err());
    }
}
