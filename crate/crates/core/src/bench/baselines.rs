use serde::{Deserialize, Serialize};

/// One published row of error statistics. Kept for side-by-side display
/// only; measured runs are never checked against these numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub model: String,
    pub dataset: String,
    pub std_error: f64,
    pub lowest_error: f64,
    pub mean_error: f64,
}

const ROWS: [(&str, f64, f64, f64); 7] = [
    ("Resnet50", 0.052703, 0.116923, 0.148718),
    ("Resnet152", 0.049478, 0.098462, 0.130769),
    ("Vgg16", 0.163696, 0.120000, 0.197948),
    ("Vgg19", 0.159544, 0.110769, 0.193333),
    ("Squeezeenet", 0.125697, 0.166154, 0.239230),
    ("Alexnet", 0.151687, 0.206154, 0.292307),
    ("Densenet", 0.115322, 0.089231, 0.161794),
];

/// Error rates reported for the original Food-20 experiments, over 12
/// training cycles each.
pub fn paper_baselines() -> Vec<BaselineRow> {
    ROWS.iter()
        .map(|&(model, std_error, lowest_error, mean_error)| BaselineRow {
            model: model.into(),
            dataset: "Food-20".into(),
            std_error,
            lowest_error,
            mean_error,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spot_values() {
        let rows = paper_baselines();
        assert_eq!(rows.len(), 7);
        let r50 = &rows[0];
        assert_eq!((r50.std_error, r50.lowest_error, r50.mean_error), (0.052703, 0.116923, 0.148718));
        let dense = rows.iter().find(|r| r.model == "Densenet").unwrap();
        assert_eq!((dense.lowest_error, dense.mean_error), (0.089231, 0.161794));
        let worst = rows.iter().max_by(|a, b| a.mean_error.total_cmp(&b.mean_error)).unwrap();
        assert_eq!((worst.model.as_str(), worst.mean_error), ("Alexnet", 0.292307));
    }
}
