//! Invariants over randomized inputs.

use kdlab::distill::{kd_loss, soft_ce_decomposition};
use kdlab::evalmetrics::{lcs_len, rouge_l};
use kdlab::numerics::{Graph, Tensor};
use kdlab::quant::{
    dequantize_code, fit_scale_zero, pack_nibbles, quantize_dequantize, unpack_nibbles, DEGENERATE_SCALE,
};
use kdlab::rlcot::{group_advantages, grpo_objective, kl_k3, parse_trace};
use proptest::prelude::*;

/// Exponential-time LCS over all subsequences of the shorter side.
fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let is_subseq = |s: &[u8]| {
        let mut it = long.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let pick: Vec<u8> = (0..short.len())
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| short[i])
            .collect();
        if pick.len() > best && is_subseq(&pick) {
            best = pick.len();
        }
    }
    best
}

fn words(v: &[u8]) -> String {
    v.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ")
}

proptest! {
    #[test]
    fn lcs_matches_brute_force(a in prop::collection::vec(0u8..4, 0..10), b in prop::collection::vec(0u8..4, 0..10)) {
        prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
    }

    #[test]
    fn rouge_f_is_symmetric_and_bounded(a in prop::collection::vec(0u8..5, 0..12), b in prop::collection::vec(0u8..5, 0..12)) {
        let (x, y) = (words(&a), words(&b));
        let s = rouge_l(&x, &y);
        let t = rouge_l(&y, &x);
        prop_assert!((s.f - t.f).abs() < 1e-15);
        prop_assert_eq!(s.precision, t.recall);
        prop_assert!((0.0..=1.0).contains(&s.f));
        if !a.is_empty() {
            prop_assert_eq!(rouge_l(&x, &x).f, 1.0);
        }
    }

    #[test]
    fn advantages_are_standardized(r in prop::collection::vec(-10.0f64..10.0, 2..16)) {
        let a = group_advantages(&r).unwrap();
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std < 1e-8 {
            prop_assert!(a.iter().all(|&x| x == 0.0));
        } else {
            let am = a.iter().sum::<f64>() / n;
            let astd = (a.iter().map(|x| (x - am).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(am.abs() < 1e-12);
            prop_assert!((astd - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn k3_is_nonnegative_and_zero_only_at_equality(cur in -20.0f64..0.0, reference in -20.0f64..0.0) {
        let k = kl_k3(cur, reference);
        prop_assert!(k >= 0.0);
        prop_assert_eq!(kl_k3(cur, cur), 0.0);
        if (cur - reference).abs() > 1e-6 {
            prop_assert!(k > 0.0);
        }
    }

    #[test]
    fn clipping_is_inert_inside_the_trust_region(
        ratios in prop::collection::vec(0.81f64..1.19, 1..8),
        seed_adv in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let adv = &seed_adv[..ratios.len()];
        let plain = ratios.iter().zip(adv).map(|(r, a)| r * a).sum::<f64>() / ratios.len() as f64;
        prop_assert_eq!(grpo_objective(&ratios, adv, 0.0, 0.2, 0.0).unwrap(), plain);
    }

    #[test]
    fn clipped_objective_never_exceeds_unclipped(
        ratios in prop::collection::vec(0.0f64..3.0, 1..8),
        seed_adv in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let adv = &seed_adv[..ratios.len()];
        let plain = ratios.iter().zip(adv).map(|(r, a)| r * a).sum::<f64>() / ratios.len() as f64;
        prop_assert!(grpo_objective(&ratios, adv, 0.0, 0.2, 0.0).unwrap() <= plain + 1e-12);
    }

    #[test]
    fn nibble_pack_round_trip(codes in prop::collection::vec(0u8..16, 0..64)) {
        let packed = pack_nibbles(&codes);
        prop_assert_eq!(packed.len(), codes.len().div_ceil(2));
        prop_assert_eq!(unpack_nibbles(&packed, codes.len()), codes);
    }

    #[test]
    fn in_range_round_trip_error_is_half_a_step(group in prop::collection::vec(-4.0f64..4.0, 1..40), bits in 2u8..=8) {
        let (s, z) = fit_scale_zero(&group, bits);
        let q_max = (1u16 << bits) - 1;
        prop_assert!(u16::from(z) <= q_max);
        for &w in &group {
            let (code, w_hat) = quantize_dequantize(w, s, z, bits);
            prop_assert!(u16::from(code) <= q_max);
            prop_assert_eq!(w_hat, dequantize_code(code, s, z));
            if s > DEGENERATE_SCALE {
                prop_assert!((w - w_hat).abs() <= s / 2.0 * (1.0 + 1e-12), "{} {} {}", w, w_hat, s);
            } else {
                prop_assert!((w - w_hat).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn kd_is_nonnegative_and_decomposes(
        t in prop::collection::vec(-6.0f64..6.0, 15),
        s in prop::collection::vec(-6.0f64..6.0, 15),
        tau in 0.25f64..8.0,
    ) {
        let tt = Tensor::new(&[3, 5], t).unwrap();
        let st = Tensor::new(&[3, 5], s).unwrap();
        let mask = [true, false, true];
        let terms = soft_ce_decomposition(&tt, &st, &mask, tau).unwrap();
        prop_assert!(terms.kl >= -1e-12);
        prop_assert!((terms.kl - (terms.soft_cross_entropy - terms.teacher_entropy)).abs() <= 1e-10);
        let mut g = Graph::new();
        let sv = g.constant(st.clone());
        let v = kd_loss(&mut g, &tt, sv, &mask, tau).unwrap();
        prop_assert!((g.value(v).data()[0] - terms.kl).abs() <= 1e-10);
    }

    #[test]
    fn parse_trace_is_total(text in ".{0,80}") {
        let p = parse_trace(&text);
        prop_assert_eq!(p.well_formed, p.diagnostics.is_empty());
    }

    #[test]
    fn parse_trace_recovers_generated_structure(
        steps in prop::collection::vec("[a-z0-9+= ]{0,12}", 1..5),
        answer in "[a-z0-9]{1,8}",
        lead in "[ \n]{0,3}",
    ) {
        let body: String = steps.iter().enumerate().map(|(i, s)| format!("Step {}: {s}\n", i + 1)).collect();
        let text = format!("{lead}<think>\n{body}</think>{answer}");
        let p = parse_trace(&text);
        prop_assert!(p.well_formed, "{:?}", p.diagnostics);
        prop_assert_eq!(p.steps.len(), steps.len());
        for (st, s) in p.steps.iter().zip(&steps) {
            prop_assert_eq!(&st.text, s.trim());
        }
        prop_assert_eq!(p.valid_step_prefix(), steps.len());
        prop_assert_eq!(p.final_answer.as_deref(), Some(answer.as_str()));
        let think = format!("\n{body}");
        prop_assert_eq!(p.think_text.as_deref(), Some(think.as_str()));
    }
}
