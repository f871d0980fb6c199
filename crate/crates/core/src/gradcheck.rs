//! Finite-difference verification of tape backward rules. The numeric side
//! only ever calls the forward pass, so it stays independent of every
//! backward implementation it is checking.

use crate::error::{CoreError, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Worst single disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct WorstEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<WorstEntry>,
}

fn eval_loss<B>(params: &[Tensor<f64>], build: &B) -> Result<f64>
where
    B: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let t = tape.value(loss);
    if t.len() != 1 {
        return Err(CoreError::NonScalarLoss { dims: t.dims().to_vec() });
    }
    Ok(t.data()[0])
}

/// Compare the analytic gradient of `build`'s scalar output against central
/// differences with step `eps`, entry by entry, in 64-bit precision.
///
/// Relative error per entry is |a - n| / max(|a|, |n|, 1e-8); the report
/// carries the maximum and the worst offender.
pub fn grad_check<B>(params: &[Tensor<f64>], build: B, eps: f64) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    if eps <= 0.0 {
        return Err(CoreError::invalid("grad_check", format!("eps must be positive, got {eps}")));
    }
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = params
        .iter()
        .map(|p| {
            let mut t = p.clone();
            t.requires_grad = true;
            tape.leaf(t)
        })
        .collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    // Numeric pass, one central difference per parameter entry.
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None };
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let mut shifted = params.to_vec();
            shifted[pi].data_mut()[j] += eps;
            let up = eval_loss(&shifted, &build)?;
            shifted[pi].data_mut()[j] -= 2.0 * eps;
            let down = eval_loss(&shifted, &build)?;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst =
                    Some(WorstEntry { param: pi, index: j, analytic: a, numeric, rel_err: rel });
            }
        }
    }
    Ok(report)
}

/// Quantized random levels plus a sub-quantum offset per dilation cell.
/// Taps of one pooling window sit 3 apart, so they land in distinct cells
/// and differ by at least 0.004; an eps-sized perturbation during finite
/// differencing can never flip a pooling argmax.
pub fn tie_free_map(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = crate::rng::rng_from_seed(seed);
    Tensor::from_fn(vec![c, h, w], |i| {
        let y = (i / w) % h;
        let x = i % w;
        let cell = ((y / 3) % 5) * 5 + (x / 3) % 5;
        rng.gen_range(-10i32..=10) as f64 * 0.2 + cell as f64 * 0.004
    })
}

/// Tie-free map upsampled by pixel doubling: bilinear resize back to the
/// base resolution averages each constant 2x2 block exactly, so the pooled
/// references stay tie-free too.
pub fn tie_free_map_2x(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let base = tie_free_map(c, h, w, seed);
    Tensor::from_fn(vec![c, h * 2, w * 2], |i| {
        let (h2, w2) = (h * 2, w * 2);
        let ch = i / (h2 * w2);
        let y = (i / w2) % h2;
        let x = i % w2;
        base.at3(ch, y / 2, x / 2)
    })
}

/// Full-block gradient check on the standard geometry: level 0 carries 8
/// channels at twice the target resolution, every other level 16 channels
/// at the target resolution, and the last level is the target. Parameters
/// and input maps are all checked; `w_alpha` is re-randomized away from its
/// zero init so gradients reach the embeddings.
///
/// `inject_fault` routes the block output through a sign-flipped identity,
/// a mutation fixture proving the checker reports wrong backward rules.
pub fn check_block(
    kind: crate::block::CorrelationKind,
    levels: usize,
    size: usize,
    eps: f64,
    inject_fault: bool,
) -> Result<GradCheckReport> {
    use crate::block::{
        cross_fusion_forward, BlockParamIds, BlockParams, CrossFusionConfig, FeatureHierarchy,
    };
    use rand::Rng;

    if levels == 0 {
        return Err(CoreError::invalid("check_block", "levels must be at least 1"));
    }
    if size < 2 {
        return Err(CoreError::invalid("check_block", "size must be at least 2"));
    }
    let target = levels - 1;
    let channels: Vec<usize> =
        (0..levels).map(|i| if i == 0 && levels > 1 { 8 } else { 16 }).collect();
    let maps: Vec<Tensor<f64>> = (0..levels)
        .map(|i| {
            let seed = 701 + i as u64;
            if i == 0 && levels > 1 {
                tie_free_map_2x(channels[i], size, size, seed)
            } else {
                tie_free_map(channels[i], size, size, seed)
            }
        })
        .collect();
    let cfg = CrossFusionConfig { correlation: kind, ..CrossFusionConfig::default() };
    let mut rng = crate::rng::rng_from_seed(700);
    let mut params = BlockParams::init(channels[target], &channels, &cfg, &mut rng)?;
    for v in params.w_alpha.data_mut() {
        *v = rng.gen_range(-0.3..0.3);
    }
    let n_params = params.w_phi.len() + 2;
    let mut all: Vec<Tensor<f64>> = params.tensors().into_iter().cloned().collect();
    all.extend(maps.iter().cloned());
    let weight_map =
        Tensor::from_fn(vec![channels[target], size, size], |i| ((i % 13) as f64 - 6.0) * 0.008);

    grad_check(
        &all,
        move |tape, ids| {
            let pids = BlockParamIds {
                w_theta: ids[0],
                w_phi: ids[1..n_params - 1].to_vec(),
                w_alpha: ids[n_params - 1],
            };
            let h = FeatureHierarchy { maps: ids[n_params..].to_vec(), target_index: target };
            let mut out = cross_fusion_forward(tape, &h, &pids, &cfg)?;
            if inject_fault {
                out = tape.sign_flipped_identity(out);
            }
            let m = tape.constant(weight_map.clone());
            let weighted = tape.mul(out, m)?;
            Ok(tape.sum_all(weighted))
        },
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn rand_tensor(dims: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = rng_from_seed(seed);
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_program_gradient_is_exact() {
        // f(w) = sum(w * x): df/dw = x, recovered to near machine precision.
        let w = rand_tensor(vec![2, 3], 1);
        let x = rand_tensor(vec![2, 3], 2);
        let report = grad_check(
            &[w],
            |tape, ids| {
                let xi = tape.constant(x.clone());
                let prod = tape.mul(ids[0], xi)?;
                Ok(tape.sum_all(prod))
            },
            1e-3,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-10,
            "rel err {} worst {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn conv_softmax_sum_chain_checks_out() {
        let x = rand_tensor(vec![3, 4, 4], 3);
        let w = rand_tensor(vec![5, 3], 4);
        let report = grad_check(
            &[x, w],
            |tape, ids| {
                let y = tape.conv1x1(ids[0], ids[1])?;
                let s = tape.softmax_axis(y, 0)?;
                // Weight the softmax so its gradient does not vanish by
                // symmetry.
                let m =
                    tape.constant(Tensor::from_fn(vec![5, 4, 4], |i| (i % 7) as f64 * 0.3 - 0.9));
                let weighted = tape.mul(s, m)?;
                Ok(tape.sum_all(weighted))
            },
            3e-4,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "rel err {} worst {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn every_op_backward_matches_finite_differences() {
        // One composite program touching each differentiable op once,
        // evaluated away from relu/pool kinks by construction: the inputs
        // are distinct multiples of 0.137, so no two taps tie and nothing
        // sits within eps of zero.
        let x = Tensor::from_fn(vec![2, 6, 6], |i| ((i * 29 % 72) as f64 - 35.5) * 0.137);
        let w = rand_tensor(vec![2, 2], 6);
        let w3 = rand_tensor(vec![2, 2, 3, 3], 7);
        let report = grad_check(
            &[x, w, w3],
            |tape, ids| {
                let conv = tape.conv1x1(ids[0], ids[1])?;
                let act = tape.relu(conv);
                let pooled = tape.dilated_max_pool(act, 3, 2)?;
                let down = tape.conv3x3s2(pooled, ids[2])?;
                let up = tape.resize_bilinear(down, 5, 4)?;
                let gate = tape.sigmoid(up);
                let sm = tape.softmax_axis(gate, 0)?;
                let m =
                    tape.constant(Tensor::from_fn(vec![2, 5, 4], |i| (i % 5) as f64 * 0.04 - 0.08));
                let weighted = tape.mul(sm, m)?;
                let scaled = tape.scale(weighted, 0.5);
                Ok(tape.sum_all(scaled))
            },
            2e-4,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "rel err {} worst {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn attention_plumbing_ops_check_out() {
        let q = rand_tensor(vec![3, 4, 4], 8);
        let k1 = rand_tensor(vec![3, 4, 4], 9);
        let k2 = rand_tensor(vec![3, 4, 4], 10);
        let report = grad_check(
            &[q, k1, k2],
            |tape, ids| {
                let l1 = tape.pointwise_dot(ids[0], ids[1])?;
                let l2 = tape.pointwise_dot(ids[0], ids[2])?;
                let stacked = tape.stack0(&[l1, l2])?;
                let weights = tape.softmax_axis(stacked, 0)?;
                let w1 = tape.slice0(weights, 0)?;
                let w2 = tape.slice0(weights, 1)?;
                let t1 = tape.scale_map(ids[1], w1)?;
                let t2 = tape.scale_map(ids[2], w2)?;
                let fused = tape.add(t1, t2)?;
                let cat = tape.concat0(&[fused, ids[0]])?;
                let m =
                    tape.constant(Tensor::from_fn(vec![6, 4, 4], |i| (i % 11) as f64 * 0.2 - 1.0));
                let weighted = tape.mul(cat, m)?;
                Ok(tape.sum_all(weighted))
            },
            1e-4,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "rel err {} worst {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn cross_entropy_backward_checks_out() {
        let logits = rand_tensor(vec![3, 4, 4], 11);
        let targets: Vec<u32> = (0..16).map(|i| (i % 3) as u32).collect();
        let weights = [1.0, 2.5, 0.5];
        let report = grad_check(
            &[logits],
            |tape, ids| tape.weighted_cross_entropy(ids[0], &targets, &weights),
            1e-4,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "rel err {} worst {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn rejects_non_scalar_and_bad_eps() {
        let x = rand_tensor(vec![2, 2], 12);
        let err = grad_check(&[x.clone()], |tape, ids| Ok(tape.relu(ids[0])), 1e-3).unwrap_err();
        assert!(matches!(err, CoreError::NonScalarLoss { .. }));
        assert!(grad_check(&[x], |tape, ids| Ok(tape.sum_all(ids[0])), 0.0).is_err());
    }

    #[test]
    fn block_check_passes_for_every_kind_on_reference_geometry() {
        for kind in crate::block::CorrelationKind::ALL {
            let report = check_block(kind, 3, 6, 1e-3, false).unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "{}: rel err {} worst {:?}",
                kind.name(),
                report.max_rel_err,
                report.worst
            );
        }
    }

    #[test]
    fn block_check_passes_on_single_level_hierarchy() {
        let report =
            check_block(crate::block::CorrelationKind::EmbeddedGaussian, 1, 6, 1e-3, false)
                .unwrap();
        assert!(report.max_rel_err < 1e-4, "worst {:?}", report.worst);
    }

    #[test]
    fn sign_flipped_backward_rule_is_caught() {
        // Mutation check: the fixture negates gradients flowing through the
        // block output, so analytic and numeric disagree by a factor -1 and
        // the relative error saturates near 2.
        let report =
            check_block(crate::block::CorrelationKind::EmbeddedGaussian, 3, 6, 1e-3, true).unwrap();
        assert!(report.max_rel_err > 1.0, "fixture went undetected: {report:?}");
        assert!(report.worst.is_some());
    }

    #[test]
    fn block_check_rejects_degenerate_geometry() {
        use crate::block::CorrelationKind;
        assert!(check_block(CorrelationKind::EmbeddedGaussian, 0, 6, 1e-3, false).is_err());
        assert!(check_block(CorrelationKind::EmbeddedGaussian, 3, 1, 1e-3, false).is_err());
    }
}
