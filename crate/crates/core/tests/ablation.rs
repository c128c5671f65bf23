//! With dreaming switched off the pipeline is plain rehearsal, step for step.

mod common;

use common::matches_plain_rehearsal;
use d2l::cl::Method;

#[test]
fn er_without_dreams_is_plain_er() {
    matches_plain_rehearsal(Method::Er, &[0, 1]).unwrap();
}

#[test]
fn er_ace_without_dreams_is_plain_er_ace() {
    matches_plain_rehearsal(Method::ErAce, &[0, 1]).unwrap();
}
