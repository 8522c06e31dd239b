mod common;

use common::*;

#[test]
fn conv3d_matches_direct_sum() {
    repeat(1, 100, conv_trial).unwrap();
}

#[test]
fn maxpool_matches_block_scan() {
    repeat(2, 100, maxpool_trial).unwrap();
}

#[test]
fn upsampling_matches_separable_interpolation() {
    repeat(3, 100, upsample_trial).unwrap();
}

#[test]
fn resampling_matches_corner_weights() {
    repeat(4, 100, resample_trial).unwrap();
}

#[test]
fn components_3d_match_union_find() {
    repeat(5, 100, |r| components_trial(r, false)).unwrap();
}

#[test]
fn components_2d_match_union_find() {
    repeat(6, 100, |r| components_trial(r, true)).unwrap();
}

#[test]
fn surface_distances_match_all_pairs() {
    repeat(7, 100, surface_trial).unwrap();
}

#[test]
fn dice_matches_transcription() {
    repeat(8, 50, dice_trial).unwrap();
}
