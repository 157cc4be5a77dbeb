use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::Binder;

use super::mlp::MlpAdapter;
use super::routing::Modality;

/// How one modality's projection starts out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionInit {
    /// Identity; requires `in_dim == dim`.
    Identity,
    /// Zero, so the modality is neutral until trained.
    Zero,
}

/// Concat-project fusion: `z = [x_1·P_1, …, x_M·P_M]·J + b_J`, then a
/// residual GELU MLP. Applied row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionAdapter {
    pub modalities: Vec<Modality>,
    /// `P_m`, `[in_m × dim]`, in `modalities` order.
    pub proj: Vec<Tensor>,
    /// `J`, `[M·dim × dim]`, initialised as stacked identities.
    pub joint_w: Tensor,
    pub joint_b: Tensor,
    pub mlp: MlpAdapter,
}

impl FusionAdapter {
    pub fn new<R: Rng + ?Sized>(
        inputs: &[(Modality, usize, ProjectionInit)],
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Config(
                "fusion adapter needs at least one modality".into(),
            ));
        }
        let mut modalities = Vec::new();
        let mut proj = Vec::new();
        for &(m, in_dim, init) in inputs {
            if modalities.contains(&m) {
                return Err(Error::Config(format!(
                    "modality {m} listed twice in fusion adapter"
                )));
            }
            let p = match init {
                ProjectionInit::Identity if in_dim == dim => {
                    Tensor::from_fn(&[dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 })
                }
                ProjectionInit::Identity => {
                    return Err(Error::Config(format!(
                        "identity projection for {m} needs in_dim {in_dim} == fusion dim {dim}"
                    )))
                }
                ProjectionInit::Zero => Tensor::zeros(&[in_dim, dim]),
            };
            modalities.push(m);
            proj.push(p);
        }
        let k = modalities.len();
        let joint_w = Tensor::from_fn(&[k * dim, dim], |i| {
            let (r, c) = (i / dim, i % dim);
            if r % dim == c {
                1.0
            } else {
                0.0
            }
        });
        Ok(Self {
            modalities,
            proj,
            joint_w,
            joint_b: Tensor::zeros(&[dim]),
            mlp: MlpAdapter::new(dim, hidden, dim, true, true, rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.joint_b.numel()
    }

    pub fn proj_name(m: Modality) -> String {
        format!("proj_{m}")
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        for (m, p) in self.modalities.iter().zip(&self.proj) {
            f(Self::proj_name(*m), p);
        }
        f("joint_w".into(), &self.joint_w);
        f("joint_b".into(), &self.joint_b);
        for (n, t) in self.mlp.arrays() {
            f(format!("mlp_{n}"), t);
        }
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (m, p) in self.modalities.iter().zip(self.proj.iter_mut()) {
            f(Self::proj_name(*m), p);
        }
        f("joint_w".into(), &mut self.joint_w);
        f("joint_b".into(), &mut self.joint_b);
        for (n, t) in self.mlp.arrays_mut() {
            f(format!("mlp_{n}"), t);
        }
    }
}

/// Fuses per-modality row matrices. `inputs[i]` pairs with
/// `fusion.modalities[i]`; `None` contributes zeros.
pub fn fusion_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    name: &str,
    fusion: &FusionAdapter,
    inputs: &[Option<Var>],
) -> Result<Var> {
    if inputs.len() != fusion.modalities.len() {
        return Err(Error::Contract(format!(
            "fusion over {:?} got {} inputs",
            fusion.modalities,
            inputs.len()
        )));
    }
    let rows = inputs
        .iter()
        .flatten()
        .map(|&v| tape.shape(v)[0])
        .next()
        .ok_or_else(|| Error::Contract("fusion needs at least one present modality".into()))?;
    let dim = fusion.dim();
    let mut parts = Vec::with_capacity(inputs.len());
    for ((m, p), x) in fusion.modalities.iter().zip(&fusion.proj).zip(inputs) {
        let part = match x {
            Some(x) => {
                if tape.shape(*x) != [rows, p.shape()[0]] {
                    return Err(Error::shape(
                        "fusion_forward",
                        tape.shape(*x),
                        &[rows, p.shape()[0]],
                    ));
                }
                let pv =
                    binder.bind(tape, &format!("{name}/{}", FusionAdapter::proj_name(*m)), p)?;
                tape.matmul(*x, pv)?
            }
            None => tape.constant(&Tensor::zeros(&[rows, dim]))?,
        };
        parts.push(part);
    }
    let cat = tape.concat(&parts)?;
    let jw = binder.bind(tape, &format!("{name}/joint_w"), &fusion.joint_w)?;
    let jb = binder.bind(tape, &format!("{name}/joint_b"), &fusion.joint_b)?;
    let z = tape.matmul(cat, jw)?;
    let z = tape.add_bias(z, jb)?;
    fusion
        .mlp
        .forward_prefixed(tape, binder, &format!("{name}/mlp_"), z)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn fresh(rng: &mut ChaCha8Rng) -> FusionAdapter {
        FusionAdapter::new(
            &[
                (Modality::Ct, 4, ProjectionInit::Identity),
                (Modality::Pet, 4, ProjectionInit::Zero),
            ],
            4,
            6,
            rng,
        )
        .unwrap()
    }

    fn run(f: &FusionAdapter, inputs: &[Option<&Tensor>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|x| x.map(|t| tape.constant(t)).transpose())
            .collect::<Result<Vec<_>>>()?;
        let y = fusion_forward(&mut tape, &mut Binder::frozen(), "fusion", f, &vars)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn zero_projection_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = fresh(&mut rng);
        let ct = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let pet = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let both = run(&f, &[Some(&ct), Some(&pet)]).unwrap();
        let zeros = run(&f, &[Some(&ct), Some(&Tensor::zeros(&[3, 4]))]).unwrap();
        let ct_only = run(&f, &[Some(&ct), None]).unwrap();
        assert_eq!(both, zeros);
        assert_eq!(both, ct_only);
        assert_eq!(both, ct);
    }

    #[test]
    fn single_modality_matches_concat_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut f = fresh(&mut rng);
        f.proj[0] = Tensor::randn(&[4, 4], 1.0, &mut rng);
        f.joint_w = Tensor::randn(&[8, 4], 1.0, &mut rng);
        f.mlp.w2 = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let ct = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let got = run(&f, &[Some(&ct), None]).unwrap();

        let proj = ct.matmul(&f.proj[0]).unwrap();
        let cat = Tensor::from_fn(&[2, 8], |i| {
            if i % 8 < 4 {
                proj.data()[(i / 8) * 4 + i % 8]
            } else {
                0.0
            }
        });
        let z = cat.matmul(&f.joint_w).unwrap();
        let mut tape = Tape::new();
        let zv = tape.constant(&z).unwrap();
        let want = f
            .mlp
            .forward(&mut tape, &mut Binder::frozen(), "m", zv)
            .unwrap();
        assert!(got.max_abs_diff(tape.value(want)).unwrap() < 1e-12);
    }

    #[test]
    fn rows_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut f = fresh(&mut rng);
        f.proj[1] = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let ct = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let pet = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let perm = [2, 0, 1];
        let permute = |t: &Tensor| Tensor::from_fn(&[3, 4], |i| t.data()[perm[i / 4] * 4 + i % 4]);
        let a = run(&f, &[Some(&ct), Some(&pet)]).unwrap();
        let b = run(&f, &[Some(&permute(&ct)), Some(&permute(&pet))]).unwrap();
        assert_eq!(permute(&a), b);
    }

    #[test]
    fn all_absent_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = fresh(&mut rng);
        assert!(matches!(run(&f, &[None, None]), Err(Error::Contract(_))));
    }
}
