use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Chest,
    HeadNeck,
}

/// Generation parameters; every field is recorded in `spec.txt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub shape: [usize; 3],
    pub region: Region,
    /// Probability that a case carries a lesion.
    pub lesion_prob: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Lesion contrast above background, HU.
    pub ct_contrast: f64,
    pub ct_noise: f64,
    pub pet_uptake_min: f64,
    pub pet_uptake_max: f64,
    pub pet_noise: f64,
    /// Restricts CT contrast to a random half of the lesion; PET still
    /// shows all of it.
    pub complementarity: bool,
    pub t0: f64,
    pub beta_volume: f64,
    pub beta_uptake: f64,
    pub time_noise: f64,
    pub censor_prob: f64,
    /// Millimetres per voxel, used for report diameters.
    pub spacing_mm: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            shape: [32, 32, 32],
            region: Region::HeadNeck,
            lesion_prob: 1.0,
            radius_min: 4.0,
            radius_max: 8.0,
            ct_contrast: 500.0,
            ct_noise: 60.0,
            pet_uptake_min: 3.0,
            pet_uptake_max: 6.0,
            pet_noise: 0.15,
            complementarity: false,
            t0: 60.0,
            beta_volume: 2.0,
            beta_uptake: 1.0,
            time_noise: 0.25,
            censor_prob: 0.3,
            spacing_mm: 1.5,
        }
    }
}

impl GenParams {
    /// Chest corpus for pre-training: half the cases carry a lesion.
    pub fn chest() -> Self {
        Self {
            region: Region::Chest,
            lesion_prob: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Generation(m));
        if self.shape.iter().any(|&s| s < 4) {
            return bad(format!("volume {:?} too small", self.shape));
        }
        if !(0.0..=1.0).contains(&self.lesion_prob) || !(0.0..=1.0).contains(&self.censor_prob) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        if self.lesion_prob > 0.0 && !(self.radius_min > 0.0) {
            return bad(format!(
                "lesion radius {} must be positive when lesions occur",
                self.radius_min
            ));
        }
        if self.radius_max < self.radius_min {
            return bad("radius_max below radius_min".into());
        }
        let half = *self.shape.iter().min().unwrap() as f64 / 2.0;
        if self.radius_max + 1.0 > half {
            return bad(format!(
                "radius {} does not fit volume {:?}",
                self.radius_max, self.shape
            ));
        }
        if self.pet_uptake_max < self.pet_uptake_min || self.t0 <= 0.0 {
            return bad("invalid uptake range or base time".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center: [f64; 3],
    pub radius: f64,
    pub uptake: f64,
    pub voxels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCase {
    pub id: String,
    /// `(master seed, case index)`; the case draws from stream `index` of
    /// the master seed.
    pub seed: (u64, u64),
    /// HU-like values.
    pub ct: Tensor,
    /// SUV-like values, non-negative.
    pub pet: Tensor,
    pub mask: Tensor,
    /// Lesion voxels with CT contrast.
    pub ct_visible: Tensor,
    pub report: String,
    pub time: f64,
    pub event: bool,
    pub class_label: bool,
    pub lesion: Option<Lesion>,
}

pub fn case_rng(master: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

pub fn generate_case(master: u64, index: u64, p: &GenParams) -> Result<SyntheticCase> {
    p.validate()?;
    let mut rng = case_rng(master, index);
    let [d, h, w] = p.shape;
    let n = d * h * w;

    // smooth background: a few random low-frequency cosines
    let waves: Vec<([f64; 3], f64, f64)> = (0..3)
        .map(|_| {
            let f = [
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
            ];
            (
                f,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(20.0..50.0),
            )
        })
        .collect();
    let coord = |i: usize| [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64];
    let mut ct = vec![0.0; n];
    let mut pet = vec![0.0; n];
    for (i, (c, q)) in ct.iter_mut().zip(pet.iter_mut()).enumerate() {
        let x = coord(i);
        let bg: f64 = waves
            .iter()
            .map(|(f, ph, a)| {
                let t = f[0] * x[0] / d as f64 + f[1] * x[1] / h as f64 + f[2] * x[2] / w as f64;
                a * (std::f64::consts::TAU * t + ph).cos()
            })
            .sum();
        let e: f64 = rng.sample(StandardNormal);
        *c = 30.0 + bg + p.ct_noise * e;
        *q = 1.0 + 0.2 * bg / 50.0;
    }

    let mut mask = vec![0.0; n];
    let mut ct_visible = vec![0.0; n];
    let class_label = rng.random_bool(p.lesion_prob);
    let lesion = if class_label {
        let radius = rng.random_range(p.radius_min..=p.radius_max);
        let center = p
            .shape
            .map(|s| rng.random_range(radius + 0.5..s as f64 - radius - 0.5));
        let uptake = rng.random_range(p.pet_uptake_min..=p.pet_uptake_max);
        let normal: [f64; 3] = {
            let v: [f64; 3] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            let norm = (v.iter().map(|a| a * a).sum::<f64>()).sqrt().max(1e-12);
            v.map(|a| a / norm)
        };
        let mut voxels = 0;
        for i in 0..n {
            let x = coord(i);
            let off = [x[0] - center[0], x[1] - center[1], x[2] - center[2]];
            if off.iter().map(|a| a * a).sum::<f64>() <= radius * radius {
                voxels += 1;
                mask[i] = 1.0;
                pet[i] += uptake;
                let side = off.iter().zip(&normal).map(|(a, b)| a * b).sum::<f64>();
                if !p.complementarity || side >= 0.0 {
                    ct_visible[i] = 1.0;
                    ct[i] += p.ct_contrast;
                }
            }
        }
        if voxels == 0 {
            return Err(Error::Generation(format!(
                "lesion of radius {radius} covers no voxel"
            )));
        }
        Some(Lesion {
            center,
            radius,
            uptake,
            voxels,
        })
    } else {
        None
    };
    for q in pet.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *q = (*q + p.pet_noise * e).max(0.0);
    }
    ct.iter_mut().for_each(|v| *v = v.clamp(-1200.0, 1200.0));

    let (v_norm, uptake_term) = match &lesion {
        Some(l) => {
            let vmax = 4.0 / 3.0 * std::f64::consts::PI * p.radius_max.powi(3);
            let span = (p.pet_uptake_max - p.pet_uptake_min).max(1e-12);
            (l.voxels as f64 / vmax, (l.uptake - p.pet_uptake_min) / span)
        }
        None => (0.0, 0.0),
    };
    let eps: f64 = rng.sample(StandardNormal);
    let t_event =
        p.t0 * (-p.beta_volume * v_norm - p.beta_uptake * uptake_term + p.time_noise * eps).exp();
    let censored = rng.random_bool(p.censor_prob);
    let time = if censored {
        t_event * rng.random_range(0.05..1.0)
    } else {
        t_event
    };
    let report = report_text(p, lesion.as_ref(), &mut rng);

    Ok(SyntheticCase {
        id: format!("case{index:05}"),
        seed: (master, index),
        ct: Tensor::new(&p.shape, ct)?,
        pet: Tensor::new(&p.shape, pet)?,
        mask: Tensor::new(&p.shape, mask)?,
        ct_visible: Tensor::new(&p.shape, ct_visible)?,
        report,
        time,
        event: !censored,
        class_label,
        lesion,
    })
}

pub fn generate_cohort(master: u64, n: usize, p: &GenParams) -> Result<Vec<SyntheticCase>> {
    (0..n as u64).map(|i| generate_case(master, i, p)).collect()
}

/// Even millimetre diameter clamped to the report vocabulary.
pub fn diameter_mm(radius: f64, spacing: f64) -> u32 {
    let d = (radius * spacing).round() as u32 * 2;
    d.clamp(6, 28)
}

pub fn size_word(mm: u32) -> &'static str {
    match mm {
        0..=9 => "tiny",
        10..=13 => "small",
        14..=17 => "medium",
        18..=21 => "large",
        _ => "bulky",
    }
}

pub fn uptake_word(uptake: f64, p: &GenParams) -> &'static str {
    let span = (p.pet_uptake_max - p.pet_uptake_min).max(1e-12);
    match ((uptake - p.pet_uptake_min) / span * 4.0).floor() as i64 {
        i64::MIN..=0 => "low",
        1 => "moderate",
        2 => "high",
        _ => "intense",
    }
}

pub const NEGATIVE_PROMPT: &str = "ct chest shows normal lung clear";
pub const POSITIVE_PROMPT: &str = "ct chest shows lesion";
const SITES: [&str; 6] = [
    "oropharynx",
    "larynx",
    "hypopharynx",
    "nasopharynx",
    "tonsil",
    "tongue base",
];

fn report_text(p: &GenParams, lesion: Option<&Lesion>, rng: &mut ChaCha8Rng) -> String {
    match (p.region, lesion) {
        (Region::Chest, None) => NEGATIVE_PROMPT.to_string(),
        (Region::Chest, Some(l)) => {
            let mm = diameter_mm(l.radius, p.spacing_mm);
            let side = if l.center[2] < p.shape[2] as f64 / 2.0 {
                "right"
            } else {
                "left"
            };
            let lobe = if l.center[0] < p.shape[0] as f64 / 2.0 {
                "upper"
            } else {
                "lower"
            };
            format!(
                "ct chest shows {} lesion in the {side} {lobe} lobe measuring {mm} mm",
                size_word(mm)
            )
        }
        (Region::HeadNeck, None) => "pet ct head and neck shows no abnormality".to_string(),
        (Region::HeadNeck, Some(l)) => {
            let mm = diameter_mm(l.radius, p.spacing_mm);
            let site = SITES[rng.random_range(0..SITES.len())];
            format!(
                "pet ct head and neck shows {} mass in the {site} measuring {mm} mm with {} uptake",
                size_word(mm),
                uptake_word(l.uptake, p)
            )
        }
    }
}

/// Stratified fold assignment: events and censored cases are shuffled
/// separately and dealt round-robin.
pub fn split_folds(events: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || events.len() < k {
        return Err(Error::Contract(format!(
            "cannot split {} cases into {k} folds",
            events.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(events.len());
    for want in [true, false] {
        let mut group: Vec<usize> = (0..events.len()).filter(|&i| events[i] == want).collect();
        for i in (1..group.len()).rev() {
            group.swap(i, rng.random_range(0..=i));
        }
        order.extend(group);
    }
    let mut folds = vec![0; events.len()];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    Ok(folds)
}
