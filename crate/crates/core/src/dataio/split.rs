use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::RngState;

/// Patient-level split. Every list is sorted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitManifest {
    pub pretrain: Vec<String>,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitConfig {
    /// Labeled patients that join the unlabeled ones in pretraining.
    pub n_labeled_pretrain: usize,
    /// Probe / finetune patients, drawn from the labeled pretraining subset.
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl SplitConfig {
    pub fn full_scale() -> Self {
        SplitConfig { n_labeled_pretrain: 657, n_train: 657, n_validation: 117, n_test: 219, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Pretrain,
    Train,
    Validation,
    Test,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Pretrain => "pretrain",
            Role::Train => "train",
            Role::Validation => "validation",
            Role::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Role::Pretrain),
            "train" => Ok(Role::Train),
            "validation" => Ok(Role::Validation),
            "test" => Ok(Role::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split role '{s}'"))),
        }
    }
}

pub fn make_splits(labeled: &[String], unlabeled: &[String], cfg: &SplitConfig) -> Result<SplitManifest> {
    let lab: BTreeSet<&String> = labeled.iter().collect();
    let unl: BTreeSet<&String> = unlabeled.iter().collect();
    if lab.len() != labeled.len() || unl.len() != unlabeled.len() {
        return Err(Error::InvalidArgument("duplicate patient ids".into()));
    }
    if let Some(id) = lab.intersection(&unl).next() {
        return Err(Error::InvalidArgument(format!("patient {id} is both labeled and unlabeled")));
    }
    if cfg.n_train > cfg.n_labeled_pretrain {
        return Err(Error::InsufficientData(format!(
            "train set of {} exceeds the {} labeled pretraining patients",
            cfg.n_train, cfg.n_labeled_pretrain
        )));
    }
    let need = cfg.n_labeled_pretrain + cfg.n_validation + cfg.n_test;
    if need > lab.len() {
        return Err(Error::InsufficientData(format!(
            "split needs {need} labeled patients, {} available",
            lab.len()
        )));
    }
    let mut order: Vec<String> = lab.into_iter().cloned().collect();
    let mut rng = RngState::derive(cfg.seed, "split");
    rng.shuffle(&mut order);

    let (lp, rest) = order.split_at(cfg.n_labeled_pretrain);
    let (val, rest) = rest.split_at(cfg.n_validation);
    let test = &rest[..cfg.n_test];

    let sorted = |v: &[String]| {
        let mut v = v.to_vec();
        v.sort();
        v
    };
    let mut pretrain: Vec<String> = unl.into_iter().cloned().chain(lp.iter().cloned()).collect();
    pretrain.sort();
    let manifest = SplitManifest {
        pretrain,
        train: sorted(&lp[..cfg.n_train]),
        validation: sorted(val),
        test: sorted(test),
    };
    manifest.check()?;
    Ok(manifest)
}

impl SplitManifest {
    /// Verifies the disjointness invariants; a violation is a leakage error.
    pub fn check(&self) -> Result<()> {
        let pre: BTreeSet<&String> = self.pretrain.iter().collect();
        let val: BTreeSet<&String> = self.validation.iter().collect();
        if let Some(id) = self.train.iter().find(|id| !pre.contains(id)) {
            return Err(Error::Leakage(format!("train patient {id} not in pretraining set")));
        }
        if let Some(id) = self.validation.iter().find(|id| pre.contains(id)) {
            return Err(Error::Leakage(format!("validation patient {id} seen in pretraining")));
        }
        if let Some(id) = self.test.iter().find(|id| pre.contains(id)) {
            return Err(Error::Leakage(format!("test patient {id} seen in pretraining")));
        }
        if let Some(id) = self.test.iter().find(|id| val.contains(id)) {
            return Err(Error::Leakage(format!("patient {id} in both validation and test")));
        }
        Ok(())
    }

    pub fn role_of(&self, id: &str) -> Vec<Role> {
        let mut roles = Vec::new();
        for (role, list) in [
            (Role::Pretrain, &self.pretrain),
            (Role::Train, &self.train),
            (Role::Validation, &self.validation),
            (Role::Test, &self.test),
        ] {
            if list.binary_search_by(|p| p.as_str().cmp(id)).is_ok() {
                roles.push(role);
            }
        }
        roles
    }

    pub fn ids(&self, role: Role) -> &[String] {
        match role {
            Role::Pretrain => &self.pretrain,
            Role::Train => &self.train,
            Role::Validation => &self.validation,
            Role::Test => &self.test,
        }
    }

    /// (patient_id, role) rows; a train patient appears twice.
    pub fn rows(&self) -> Vec<(String, Role)> {
        let mut rows = Vec::new();
        for role in [Role::Pretrain, Role::Train, Role::Validation, Role::Test] {
            rows.extend(self.ids(role).iter().map(|id| (id.clone(), role)));
        }
        rows
    }

    pub fn from_rows(rows: impl IntoIterator<Item = (String, Role)>) -> Result<Self> {
        let mut m = SplitManifest::default();
        for (id, role) in rows {
            match role {
                Role::Pretrain => m.pretrain.push(id),
                Role::Train => m.train.push(id),
                Role::Validation => m.validation.push(id),
                Role::Test => m.test.push(id),
            }
        }
        for v in [&mut m.pretrain, &mut m.train, &mut m.validation, &mut m.test] {
            v.sort();
            let before = v.len();
            v.dedup();
            if v.len() != before {
                return Err(Error::InvalidArgument("duplicate patient in one split role".into()));
            }
        }
        m.check()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i:04}")).collect()
    }

    #[test]
    fn full_scale_configuration() {
        let m = make_splits(&ids("l", 996), &ids("u", 989), &SplitConfig::full_scale()).unwrap();
        assert_eq!(m.pretrain.len(), 989 + 657);
        assert_eq!(m.train.len(), 657);
        assert_eq!(m.validation.len(), 117);
        assert_eq!(m.test.len(), 219);
    }

    #[test]
    fn small_split_is_disjoint() {
        let cfg = SplitConfig { n_labeled_pretrain: 6, n_train: 6, n_validation: 2, n_test: 2, seed: 3 };
        let m = make_splits(&ids("s", 10), &[], &cfg).unwrap();
        m.check().unwrap();
        for id in &m.test {
            assert_eq!(m.role_of(id), vec![Role::Test]);
        }
    }

    #[test]
    fn oversized_requests_fail() {
        let cfg = SplitConfig { n_labeled_pretrain: 4, n_train: 5, n_validation: 2, n_test: 2, seed: 0 };
        assert!(make_splits(&ids("s", 10), &[], &cfg).is_err());
        let cfg = SplitConfig { n_labeled_pretrain: 8, n_train: 8, n_validation: 2, n_test: 2, seed: 0 };
        assert!(make_splits(&ids("s", 10), &[], &cfg).is_err());
    }

    #[test]
    fn leaked_manifest_rejected() {
        let rows = vec![("a".to_string(), Role::Pretrain), ("a".to_string(), Role::Test)];
        assert!(matches!(SplitManifest::from_rows(rows), Err(Error::Leakage(_))));
    }
}
