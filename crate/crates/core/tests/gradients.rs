mod common;

use common::{grad_check, tiny_spec};
use rscvae::latent::JsImpl;
use rscvae::losses::{Role, TrainingMode};
use rscvae::networks::EncoderSpec;

fn assert_close(spec: &EncoderSpec, mode: TrainingMode, roles: &[Role], js: JsImpl, coords: Option<usize>) {
    let g = grad_check(spec, mode, roles, js, coords);
    assert!(
        g.worst_rel < 1e-3,
        "mode {}: {} has relative error {} (worst of {} parameters)",
        mode.code(),
        g.worst_param,
        g.worst_rel,
        g.checked
    );
}

#[test]
fn one_class_objective_gradient() {
    assert_close(&tiny_spec(), TrainingMode::OneClass, &[Role::Normal; 4], JsImpl::MomentMatched, None);
}

#[test]
fn shifted_objective_gradient() {
    let roles = [Role::Normal, Role::PseudoAnomaly, Role::Normal, Role::PseudoAnomaly];
    assert_close(&tiny_spec(), TrainingMode::Shifted, &roles, JsImpl::MomentMatched, None);
}

#[test]
fn imbalanced_objective_gradient() {
    let roles = [Role::RealAnomaly, Role::Normal, Role::Normal, Role::Normal];
    assert_close(&tiny_spec(), TrainingMode::Imbalanced, &roles, JsImpl::MomentMatched, None);
    assert_close(&tiny_spec(), TrainingMode::Imbalanced, &roles, JsImpl::SymmetricKl, None);
}

#[test]
fn resnet_objective_gradient_on_sampled_coordinates() {
    let mut spec = EncoderSpec::resnet(1, 8);
    spec.input_shape = (1, 64, 64);
    let roles = [Role::Normal, Role::RealAnomaly, Role::Normal];
    assert_close(&spec, TrainingMode::Imbalanced, &roles, JsImpl::MomentMatched, Some(60));
}
