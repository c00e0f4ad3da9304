use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::oracle::{
    check_dense_bound, influenced_indices, mechanistic_dependence_check, numerical_rank, rank_equality_check,
    INFLUENCE_TOL, RANK_RTOL,
};
use crate::rng::{stream_rng, Stream};
use crate::synthgen::{sample_target, Generator, Task};
use crate::{Error, Result};

/// One entry of the assumptions report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub satisfied: bool,
    pub evidence: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssumptionOptions {
    /// Latent points for the Jacobian checks.
    pub n_points: usize,
    /// Support samples for the Jacobian norm bound.
    pub bound_samples: usize,
    /// Boundary resolution of the manifold distance search.
    pub n_boundary: usize,
    pub seed: u64,
}

impl Default for AssumptionOptions {
    fn default() -> Self {
        AssumptionOptions {
            n_points: 20,
            bound_samples: 200,
            n_boundary: 64,
            seed: 0,
        }
    }
}

fn check(name: &str, satisfied: bool, evidence: serde_json::Value) -> AssumptionCheck {
    AssumptionCheck {
        name: name.into(),
        satisfied,
        evidence,
    }
}

/// Evaluates the identification conditions on a ground-truth generator:
/// invertibility, the dense distance bound per target distance (classification
/// only), sparse influence, mechanistic dependence of the `c`-exclusive rows,
/// and rank equality of the generator against itself.
pub fn check_assumptions(gen: &Generator, distances: &[f64], opts: &AssumptionOptions) -> Result<Vec<AssumptionCheck>> {
    if opts.n_points == 0 {
        return Err(Error::Config("n_points must be >= 1".into()));
    }
    let spec = gen.spec();
    let mut rng = stream_rng(opts.seed, 0, 0, Stream::Oracle);
    let zs: Vec<Vec<f64>> = (0..opts.n_points)
        .map(|_| {
            let (_, mut z) = gen.draw_c(&mut rng);
            z.extend(gen.draw_s(&mut rng));
            z
        })
        .collect();
    let js = zs.iter().map(|z| gen.jacobian_at(z)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();

    let ranks: Vec<usize> = js.iter().map(|j| numerical_rank(j, RANK_RTOL)).collect();
    let min_sigma = js
        .iter()
        .map(|j| j.clone().svd(false, false).singular_values.min())
        .fold(f64::INFINITY, f64::min);
    let min_rank = ranks.iter().copied().min().unwrap_or(0);
    out.push(check(
        "invertibility",
        min_rank == spec.d_z(),
        json!({ "points": zs.len(), "d_z": spec.d_z(), "min_rank": min_rank, "min_singular_value": min_sigma }),
    ));

    if spec.task == Task::Classification {
        for &d in distances {
            let mut trng = stream_rng(opts.seed, d.to_bits(), 0, Stream::Target);
            let t = sample_target(gen, d, &mut trng)?;
            let r = check_dense_bound(gen, &t.latent.s, &t.latent.c, opts.bound_samples, opts.n_boundary, &mut trng)?;
            out.push(check(
                "dense_bound",
                r.satisfied,
                json!({ "target_norm": d, "support_distance": r.distance, "j_u": r.j_u, "d_min": r.d_min, "bound": r.bound }),
            ));
        }
    }

    let sets: Vec<_> = js.iter().map(|j| influenced_indices(j, spec.d_c, INFLUENCE_TOL)).collect();
    let mut i_s: Vec<usize> = sets.iter().flat_map(|s| s.i_s.iter().copied()).collect();
    i_s.sort_unstable();
    i_s.dedup();
    let exclusive: Vec<usize> = (0..spec.d_x).filter(|i| !i_s.contains(i)).collect();
    out.push(check(
        "sparse_influence",
        i_s.len() <= spec.d_s,
        json!({ "d_s": spec.d_s, "i_s": i_s, "i_c_minus_s": exclusive, "tolerance": INFLUENCE_TOL }),
    ));

    if exclusive.len() < 2 {
        out.push(check(
            "mechanistic_dependence",
            false,
            json!({ "rows": exclusive, "note": "fewer than two rows untouched by s" }),
        ));
    } else {
        let mut dependent = 0;
        let mut total = 0;
        let mut first = Vec::new();
        for (k, j) in js.iter().enumerate() {
            let parts = mechanistic_dependence_check(j, &exclusive)?;
            total += parts.len();
            dependent += parts.iter().filter(|p| p.dependent).count();
            if k == 0 {
                first = parts;
            }
        }
        out.push(check(
            "mechanistic_dependence",
            dependent == total,
            json!({ "rows": exclusive, "partitions_checked": total, "dependent": dependent, "first_point": first }),
        ));
    }

    let mut row_sets = vec![(0..spec.d_x).collect::<Vec<_>>()];
    for s in [&i_s, &exclusive] {
        if !s.is_empty() {
            row_sets.push(s.clone());
        }
    }
    let r = rank_equality_check(gen, gen, &zs, &row_sets)?;
    out.push(check(
        "rank_equality",
        r.mismatches == 0,
        json!({ "mismatches": r.mismatches, "comparisons": r.comparisons, "sweep": r.sweep }),
    ));
    Ok(out)
}
