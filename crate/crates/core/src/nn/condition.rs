use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const AGE_GROUPS: usize = 10;
pub const GENDERS: usize = 2;
/// Width of the concatenated one-hot conditioning vector.
pub const COND_DIM: usize = AGE_GROUPS + GENDERS;

/// One-hot age group ⧺ one-hot gender.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConditionVector {
    age_group: usize,
    gender: usize,
}

impl ConditionVector {
    pub fn new(age_group: usize, gender: usize) -> Result<Self> {
        if age_group >= AGE_GROUPS {
            return Err(Error::arg(format!("age group {age_group} outside 0..{AGE_GROUPS}")));
        }
        if gender >= GENDERS {
            return Err(Error::arg(format!("gender {gender} outside 0..{GENDERS}")));
        }
        Ok(ConditionVector { age_group, gender })
    }

    pub fn age_group(&self) -> usize {
        self.age_group
    }

    pub fn gender(&self) -> usize {
        self.gender
    }

    pub fn age_onehot(&self) -> [f64; AGE_GROUPS] {
        let mut v = [0.0; AGE_GROUPS];
        v[self.age_group] = 1.0;
        v
    }

    pub fn gender_onehot(&self) -> [f64; GENDERS] {
        let mut v = [0.0; GENDERS];
        v[self.gender] = 1.0;
        v
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.age_onehot().to_vec();
        v.extend(self.gender_onehot());
        v
    }

    /// Inverse of [`ConditionVector::to_vec`]; each sub-vector must hold
    /// exactly one 1 and zeros elsewhere.
    pub fn from_onehot(v: &[f64]) -> Result<Self> {
        if v.len() != COND_DIM {
            return Err(Error::dim("condition", "one-hot length", COND_DIM, v.len()));
        }
        let hot = |part: &[f64], what: &str| -> Result<usize> {
            let ones: Vec<usize> = part.iter().enumerate().filter(|(_, &x)| x == 1.0).map(|(i, _)| i).collect();
            let zeros = part.iter().filter(|&&x| x == 0.0).count();
            match ones.as_slice() {
                [i] if zeros == part.len() - 1 => Ok(*i),
                _ => Err(Error::arg(format!("{what} sub-vector is not one-hot: {part:?}"))),
            }
        };
        ConditionVector::new(hot(&v[..AGE_GROUPS], "age")?, hot(&v[AGE_GROUPS..], "gender")?)
    }
}

/// `N × 12` conditioning matrix.
pub fn condition_matrix(conds: &[ConditionVector]) -> Tensor {
    let data = conds.iter().flat_map(|c| c.to_vec()).collect();
    Tensor::new(&[conds.len(), COND_DIM], data).expect("non-empty condition batch")
}

/// `N × 12 × h × w`: every one-hot entry tiled into a constant plane.
pub fn condition_planes(conds: &[ConditionVector], h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(conds.len() * COND_DIM * h * w);
    for c in conds {
        for v in c.to_vec() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
    }
    Tensor::new(&[conds.len(), COND_DIM, h, w], data).expect("non-empty condition batch")
}
