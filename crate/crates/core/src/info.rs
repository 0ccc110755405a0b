//! Exact information quantities on small discrete distributions (nats).

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Tolerance on the total mass of a distribution passed to [`entropy`].
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;
/// Tolerance on the total mass of a [`DiscreteJoint`] table.
pub const JOINT_TOLERANCE: f64 = 1e-12;
/// Largest code length [`empirical_code_entropy`] will enumerate.
pub const MAX_ENUMERATED_BITS: usize = 12;

pub fn nats_to_bits(nats: f64) -> f64 {
    nats / std::f64::consts::LN_2
}

/// Clamped at zero: a point mass that sums to `1 + ulp` would otherwise go
/// slightly negative.
fn plogp_sum(p: impl Iterator<Item = f64>) -> f64 {
    (-p.filter(|&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()).max(0.0)
}

/// Shannon entropy `-Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Parameter("probabilities must be finite and non-negative".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(Error::Parameter(format!("distribution sums to {total}, not 1")));
    }
    Ok(plogp_sum(p.iter().copied()))
}

/// A probability table over the product of finite variables, row-major with
/// the last variable varying fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    arities: Vec<usize>,
    probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(arities: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        if arities.is_empty() || arities.iter().any(|&a| a == 0) {
            return Err(Error::Parameter("every variable needs a positive arity".into()));
        }
        let size: usize = arities.iter().product();
        if probs.len() != size {
            return Err(Error::dim("joint table", format!("{size} cells expected, got {}", probs.len())));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Parameter("joint probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > JOINT_TOLERANCE {
            return Err(Error::Parameter(format!("joint sums to {total}, not 1")));
        }
        Ok(Self { arities, probs })
    }

    pub fn arities(&self) -> &[usize] {
        &self.arities
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_vars(&self) -> usize {
        self.arities.len()
    }

    fn decode(&self, mut flat: usize, out: &mut [usize]) {
        for v in (0..self.arities.len()).rev() {
            out[v] = flat % self.arities[v];
            flat /= self.arities[v];
        }
    }

    fn check_vars(&self, vars: &[usize]) -> Result<()> {
        let mut seen = vec![false; self.arities.len()];
        for &v in vars {
            if v >= self.arities.len() {
                return Err(Error::Parameter(format!("variable {v} out of {}", self.arities.len())));
            }
            if std::mem::replace(&mut seen[v], true) {
                return Err(Error::Parameter(format!("variable {v} listed twice")));
            }
        }
        Ok(())
    }

    /// Marginal table over `vars`, in the given order.
    pub fn marginal(&self, vars: &[usize]) -> Result<DiscreteJoint> {
        self.check_vars(vars)?;
        if vars.is_empty() {
            return Err(Error::Parameter("marginal over no variables".into()));
        }
        let arities: Vec<usize> = vars.iter().map(|&v| self.arities[v]).collect();
        let mut probs = vec![0.0; arities.iter().product()];
        let mut idx = vec![0; self.arities.len()];
        for (flat, &p) in self.probs.iter().enumerate() {
            self.decode(flat, &mut idx);
            let mut target = 0;
            for (&v, &a) in vars.iter().zip(&arities) {
                target = target * a + idx[v];
            }
            probs[target] += p;
        }
        Ok(DiscreteJoint { arities, probs })
    }

    /// Joint entropy of `vars` (0 for the empty set).
    pub fn entropy_of(&self, vars: &[usize]) -> Result<f64> {
        if vars.is_empty() {
            self.check_vars(vars)?;
            return Ok(0.0);
        }
        Ok(plogp_sum(self.marginal(vars)?.probs.into_iter()))
    }

    /// `I(A; B) = Σ p(a, b) ln[p(a, b) / (p(a) p(b))]` for disjoint sets.
    pub fn mutual_information(&self, a: &[usize], b: &[usize]) -> Result<f64> {
        if a.iter().any(|v| b.contains(v)) {
            return Err(Error::Parameter("mutual information needs disjoint variable sets".into()));
        }
        if a.is_empty() || b.is_empty() {
            self.check_vars(&[a, b].concat())?;
            return Ok(0.0);
        }
        let both: Vec<usize> = a.iter().chain(b).copied().collect();
        let joint = self.marginal(&both)?;
        let pa = self.marginal(a)?;
        let pb = self.marginal(b)?;
        let nb = pb.probs.len();
        let mut total = 0.0;
        for (flat, &p) in joint.probs.iter().enumerate() {
            if p > 0.0 {
                let (ia, ib) = (flat / nb, flat % nb);
                total += p * (p / (pa.probs[ia] * pb.probs[ib])).ln();
            }
        }
        Ok(total.max(0.0))
    }

    /// `I(A; B | C) = H(A, C) + H(B, C) - H(A, B, C) - H(C)`.
    pub fn conditional_mutual_information(&self, a: &[usize], b: &[usize], c: &[usize]) -> Result<f64> {
        let ac: Vec<usize> = a.iter().chain(c).copied().collect();
        let bc: Vec<usize> = b.iter().chain(c).copied().collect();
        let abc: Vec<usize> = a.iter().chain(b).chain(c).copied().collect();
        self.check_vars(&abc)?;
        let v = self.entropy_of(&ac)? + self.entropy_of(&bc)? - self.entropy_of(&abc)? - self.entropy_of(c)?;
        Ok(v.max(0.0))
    }

    /// Appends a variable `f(source)` of the given arity.
    pub fn with_function(&self, source: usize, arity: usize, f: impl Fn(usize) -> usize) -> Result<DiscreteJoint> {
        self.check_vars(&[source])?;
        if arity == 0 {
            return Err(Error::Parameter("derived variable needs positive arity".into()));
        }
        let mut arities = self.arities.clone();
        arities.push(arity);
        let mut probs = vec![0.0; self.probs.len() * arity];
        let mut idx = vec![0; self.arities.len()];
        for (flat, &p) in self.probs.iter().enumerate() {
            self.decode(flat, &mut idx);
            let z = f(idx[source]);
            if z >= arity {
                return Err(Error::Parameter(format!("f returned {z}, outside arity {arity}")));
            }
            probs[flat * arity + z] = p;
        }
        Ok(DiscreteJoint { arities, probs })
    }

    /// Whether `target` is determined by `source` wherever `source` has mass.
    pub fn is_function_of(&self, target: usize, source: usize) -> Result<bool> {
        let pair = self.marginal(&[source, target])?;
        let at = self.arities[target];
        Ok(pair.probs.chunks(at).all(|row| row.iter().filter(|&&p| p > 0.0).count() <= 1))
    }
}

/// `|I(Z,S) - [I(Z,X) - I(X,{Z,S}) + I(X,S)]|` for a joint in which `z` is a
/// deterministic function of `x`.
pub fn verify_chain_identity(joint: &DiscreteJoint, x: usize, s: usize, z: usize) -> Result<f64> {
    joint.check_vars(&[x, s, z])?;
    if !joint.is_function_of(z, x)? {
        return Err(Error::Precondition("Z must be a deterministic function of X".into()));
    }
    let lhs = joint.mutual_information(&[z], &[s])?;
    let rhs = joint.mutual_information(&[z], &[x])? - joint.mutual_information(&[x], &[z, s])?
        + joint.mutual_information(&[x], &[s])?;
    Ok((lhs - rhs).abs())
}

/// Plug-in entropy of the empirical distribution of `codes` (each `m` bits).
pub fn empirical_code_entropy<C: AsRef<[u8]>>(codes: &[C], m: usize) -> Result<f64> {
    if m > MAX_ENUMERATED_BITS {
        return Err(Error::Parameter(format!("code length {m} exceeds {MAX_ENUMERATED_BITS} bits")));
    }
    if codes.is_empty() {
        return Err(Error::Parameter("no codes".into()));
    }
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for c in codes {
        let c = c.as_ref();
        if c.len() != m {
            return Err(Error::dim("empirical code entropy", format!("code of {} bits, expected {m}", c.len())));
        }
        let key = c.iter().fold(0u32, |k, &b| (k << 1) | u32::from(b & 1));
        *counts.entry(key).or_default() += 1;
    }
    let n = codes.len() as f64;
    let mut keys: Vec<_> = counts.into_iter().collect();
    keys.sort_unstable();
    Ok(plogp_sum(keys.into_iter().map(|(_, c)| c as f64 / n)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.9, 0.1]).unwrap() - 0.325083).abs() < 1e-6);
        assert!(entropy(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn mutual_information_examples() {
        let indep = DiscreteJoint::new(vec![2, 3], vec![0.1, 0.2, 0.2, 0.1, 0.2, 0.2]).unwrap();
        assert!(indep.mutual_information(&[0], &[1]).unwrap() < 1e-15);
        let copy = DiscreteJoint::new(vec![3], vec![0.2, 0.3, 0.5]).unwrap().with_function(0, 3, |x| x).unwrap();
        let h = entropy(&[0.2, 0.3, 0.5]).unwrap();
        assert!((copy.mutual_information(&[0], &[1]).unwrap() - h).abs() < 1e-14);
        let j = DiscreteJoint::new(vec![2, 2], vec![0.4, 0.1, 0.1, 0.4]).unwrap();
        assert!((j.mutual_information(&[0], &[1]).unwrap() - 0.192745).abs() < 1e-6);
        assert!(j.mutual_information(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn chain_identity_parity_example() {
        let x = DiscreteJoint::new(vec![4], vec![0.25; 4]).unwrap();
        let xs = x.with_function(0, 2, |v| v % 2).unwrap();
        let xsz = xs.with_function(0, 2, |v| v / 2).unwrap();
        assert!(verify_chain_identity(&xsz, 0, 1, 2).unwrap() < 1e-12);
        let constant = xs.with_function(0, 1, |_| 0).unwrap();
        assert!(verify_chain_identity(&constant, 0, 1, 2).unwrap() < 1e-12);
    }

    #[test]
    fn chain_identity_requires_function() {
        // Z depends on S rather than X.
        let j = DiscreteJoint::new(vec![2, 2, 2], vec![0.125; 8]).unwrap();
        assert!(matches!(verify_chain_identity(&j, 0, 1, 2), Err(Error::Precondition(_))));
    }

    #[test]
    fn code_entropy_examples() {
        let same = vec![vec![1u8, 0, 1]; 10];
        assert_eq!(empirical_code_entropy(&same, 3).unwrap(), 0.0);
        let all: Vec<Vec<u8>> = (0..8u8).map(|k| vec![k >> 2 & 1, k >> 1 & 1, k & 1]).collect();
        assert!((empirical_code_entropy(&all, 3).unwrap() - 3.0 * 2f64.ln()).abs() < 1e-14);
        assert!(empirical_code_entropy(&[vec![0u8; 13]], 13).is_err());
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(DiscreteJoint::new(vec![2], vec![0.5, 0.4]).is_err());
        assert!(DiscreteJoint::new(vec![2], vec![1.5, -0.5]).is_err());
        assert!(DiscreteJoint::new(vec![2, 2], vec![1.0]).is_err());
    }
}
