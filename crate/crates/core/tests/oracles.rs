mod common;

use common::*;

const FIXTURES: u64 = 200;

fn each(check: impl Fn(&mut Fixture) -> Result<(), String>) {
    for seed in 0..FIXTURES {
        let mut f = Fixture::new(seed, 64, 30);
        if let Err(m) = check(&mut f) {
            panic!("fixture {seed} ({}, T={}): {m}", f.shape, f.passes);
        }
    }
}

#[test]
fn mc_aggregate_matches_oracle() {
    each(|f| check_mc(f));
}

#[test]
fn tta_aggregate_matches_oracle() {
    each(|f| check_tta(f));
}

#[test]
fn ece_matches_oracle() {
    each(check_ece);
}

#[test]
fn dice_and_iou_match_oracle() {
    each(check_overlap);
}

#[test]
fn percentile_matches_oracle() {
    each(check_percentile);
}

#[test]
fn policies_and_deferral_f1_match_oracle() {
    each(check_policies);
}

#[test]
fn roc_auc_matches_pair_counting_exactly() {
    for seed in 0..FIXTURES {
        check_auc(seed).unwrap();
    }
}

#[test]
fn oracle_bound_formula() {
    // 10 errors in 100 pixels: deferring exactly the errors removes them all
    assert_eq!(oracle_bound_err(10, 100, 10), 1.0);
    // deferring 5 of them leaves 5 errors on 95 pixels
    let want = (0.1 - 5.0 / 95.0) / 0.1;
    assert_eq!(oracle_bound_err(10, 100, 5), want);
    assert_eq!(oracle_bound_err(10, 100, 100), 1.0);
}
