use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub num_images: usize,
    pub objects_per_image: usize,
    pub feature_dim: usize,
    pub object_types: Vec<String>,
    pub colors: Vec<String>,
    pub max_count: usize,
    /// Train-split mass of the majority answer in each question category.
    pub prior_skew: f64,
    pub questions_per_image: usize,
    /// Fraction of images whose questions go to the train split.
    pub train_fraction: f64,
    /// Fraction of images for the shifted test split; the rest is `val_iid`.
    pub test_fraction: f64,
    /// Simulate annotator disagreement and emit soft scores in {0.3, 0.6, 0.9, 1.0}.
    pub soft_targets: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            num_images: 3000,
            objects_per_image: 6,
            feature_dim: 24,
            object_types: ["ball", "cube", "cone", "ring", "star", "disk"]
                .map(String::from)
                .to_vec(),
            colors: ["red", "blue", "green", "yellow", "black", "white"]
                .map(String::from)
                .to_vec(),
            max_count: 9,
            prior_skew: 0.8,
            questions_per_image: 1,
            train_fraction: 2.0 / 3.0,
            test_fraction: 1.0 / 6.0,
            soft_targets: false,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.objects_per_image < 1 {
            return bad("objects_per_image must be >= 1".into());
        }
        if self.object_types.len() < 2 {
            return bad("object_types needs at least 2 entries".into());
        }
        if self.colors.len() < 2 {
            return bad("colors needs at least 2 entries".into());
        }
        let min_dim = self.object_types.len() + self.colors.len() + 2;
        if self.feature_dim < min_dim {
            return bad(format!(
                "feature_dim = {} must be >= |object_types| + |colors| + 2 = {min_dim}",
                self.feature_dim
            ));
        }
        if !(0.0..=1.0).contains(&self.prior_skew) {
            return bad(format!("prior_skew = {} must lie in [0, 1]", self.prior_skew));
        }
        if self.max_count < 1 {
            return bad("max_count must be >= 1".into());
        }
        if self.num_images < 3 {
            return bad("num_images must be >= 3 (one per split)".into());
        }
        if self.questions_per_image < 1 {
            return bad("questions_per_image must be >= 1".into());
        }
        let fr_ok = |f: f64| (0.0..=1.0).contains(&f);
        if !fr_ok(self.train_fraction)
            || !fr_ok(self.test_fraction)
            || self.train_fraction + self.test_fraction > 1.0
        {
            return bad(format!(
                "train_fraction = {} and test_fraction = {} must be in [0, 1] and sum to <= 1",
                self.train_fraction, self.test_fraction
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for word in self.object_types.iter().chain(&self.colors) {
            let ok = !word.is_empty()
                && word.chars().all(|c| c.is_ascii_lowercase())
                && word != "yes"
                && word != "no";
            if !ok {
                return bad(format!(
                    "`{word}` is not a valid object type or color (lowercase ascii letters, not yes/no)"
                ));
            }
            if !seen.insert(word.as_str()) {
                return bad(format!("`{word}` is listed twice across object_types/colors"));
            }
        }
        Ok(())
    }

    /// Counts that a "how many" question can have as its answer.
    pub fn count_support(&self) -> usize {
        self.max_count.min(self.objects_per_image)
    }

    /// Answer vocabulary: colors, then counts `0..=max_count`, then yes/no.
    pub fn answer_vocabulary(&self) -> Vec<String> {
        let mut v: Vec<String> = self.colors.clone();
        v.extend((0..=self.max_count).map(|n| n.to_string()));
        v.push("yes".into());
        v.push("no".into());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        WorldConfig::default().validate().unwrap();
    }

    #[test]
    fn feature_dim_bound_is_named() {
        let cfg = WorldConfig {
            feature_dim: 10,
            ..Default::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("feature_dim"), "{msg}");
    }

    #[test]
    fn skew_out_of_range() {
        let cfg = WorldConfig {
            prior_skew: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("prior_skew"));
    }

    #[test]
    fn color_clashing_with_yes_no_rejected() {
        let mut cfg = WorldConfig::default();
        cfg.colors.push("yes".into());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn vocabulary_layout() {
        let cfg = WorldConfig::default();
        let v = cfg.answer_vocabulary();
        assert_eq!(v.len(), 6 + 10 + 2);
        assert_eq!(v[0], "red");
        assert_eq!(v[6], "0");
        assert_eq!(v[17], "no");
    }
}
