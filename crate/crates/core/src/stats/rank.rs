use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    #[default]
    HigherBetter,
    LowerBetter,
}

/// 1-based ranks in ascending order; ties share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Ranks `[model][task]` (1 = best) and the per-model average over tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub models: Vec<String>,
    pub tasks: Vec<String>,
    pub ranks: Vec<Vec<f64>>,
    pub mean_rank: Vec<f64>,
}

impl RankTable {
    /// `model,<task…>,mean_rank` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for t in &self.tasks {
            out.push(',');
            out.push_str(t);
        }
        out.push_str(",mean_rank\n");
        for (m, name) in self.models.iter().enumerate() {
            out.push_str(name);
            for r in &self.ranks[m] {
                out.push_str(&format!(",{r}"));
            }
            out.push_str(&format!(",{}\n", self.mean_rank[m]));
        }
        out
    }
}

/// Ranks models per task from cell values `[model][task]`.
pub fn mean_rank(models: &[String], tasks: &[String], values: &[Vec<f64>], directions: &[Direction]) -> RankTable {
    let nm = models.len();
    let mut ranks = vec![vec![0.0; tasks.len()]; nm];
    for (t, dir) in directions.iter().enumerate().take(tasks.len()) {
        let col: Vec<f64> = (0..nm)
            .map(|m| match dir {
                Direction::HigherBetter => -values[m][t],
                Direction::LowerBetter => values[m][t],
            })
            .collect();
        for (m, r) in average_ranks(&col).into_iter().enumerate() {
            ranks[m][t] = r;
        }
    }
    let mean_rank = ranks.iter().map(|r| r.iter().sum::<f64>() / r.len().max(1) as f64).collect();
    RankTable { models: models.to_vec(), tasks: tasks.to_vec(), ranks, mean_rank }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(p: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{p}{i}")).collect()
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn one_model() {
        let r = mean_rank(&names("m", 1), &names("t", 3), &[vec![0.1, 0.2, 0.3]], &[Direction::HigherBetter; 3]);
        assert_eq!(r.mean_rank, vec![1.0]);
    }

    #[test]
    fn dominant_model() {
        let v = vec![vec![0.9, 1.0], vec![0.5, 3.0]];
        let r = mean_rank(&names("m", 2), &names("t", 2), &v, &[Direction::HigherBetter, Direction::LowerBetter]);
        assert_eq!(r.mean_rank, vec![1.0, 2.0]);
    }

    #[test]
    fn three_models_with_a_tie() {
        // Task 0: m0 and m1 tie for best; task 1: m2 > m0 > m1.
        let v = vec![vec![0.8, 0.5], vec![0.8, 0.4], vec![0.6, 0.9]];
        let r = mean_rank(&names("m", 3), &names("t", 2), &v, &[Direction::HigherBetter; 2]);
        assert_eq!(r.ranks, vec![vec![1.5, 2.0], vec![1.5, 3.0], vec![3.0, 1.0]]);
        assert_eq!(r.mean_rank, vec![1.75, 2.25, 2.0]);
        assert!(r.to_csv().starts_with("model,t0,t1,mean_rank\nm0,1.5,2,1.75\n"));
    }

    proptest! {
        #[test]
        fn monotone_transforms_keep_ranks(v in prop::collection::vec(prop::collection::vec(0u8..6, 3), 1..6)) {
            let vals: Vec<Vec<f64>> = v.iter().map(|r| r.iter().map(|&x| f64::from(x)).collect()).collect();
            let warped: Vec<Vec<f64>> = vals.iter().map(|r| r.iter().map(|x| (x * 0.7).exp() - 3.0).collect()).collect();
            let m = names("m", vals.len());
            let t = names("t", 3);
            let d = [Direction::HigherBetter, Direction::LowerBetter, Direction::HigherBetter];
            prop_assert_eq!(mean_rank(&m, &t, &vals, &d), mean_rank(&m, &t, &warped, &d));
        }
    }
}
