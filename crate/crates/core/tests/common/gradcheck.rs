use hatnet::model::{Hatnet, Input};
use hatnet::tensor::{compare_grads, finite_diff_grad, GradComparison, ParamStore};

/// Analytic vs central-difference gradient of the sample loss for every
/// parameter, in f64.
pub fn model_gradcheck(
    model: &Hatnet,
    params: &ParamStore<f64>,
    input: Input<'_>,
    label: usize,
    eps: f64,
    floor: f64,
) -> Vec<(String, GradComparison)> {
    let mut with_grads = params.clone();
    with_grads.zero_grad();
    model.accumulate_gradients(&mut with_grads, input, label).unwrap();
    let mut out = Vec::new();
    for (name, t) in with_grads.iter() {
        let analytic = t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut probe_store = params.clone();
        let numeric = finite_diff_grad(
            |probe| {
                *probe_store.get_mut(name).unwrap() = probe.clone();
                model.loss(&probe_store, input, label).unwrap()
            },
            params.get(name).unwrap(),
            eps,
        )
        .unwrap();
        out.push((name.to_string(), compare_grads(&analytic, numeric.data(), floor)));
    }
    out
}
