use sassl_core::gradcheck::{cases, worst_error, TOL, TRIALS};

#[test]
fn every_op_matches_finite_differences() {
    let all = cases();
    assert!(all.len() >= 20);
    for case in &all {
        let err = worst_error(case, TRIALS);
        assert!(err <= TOL, "{}: relative error {err:e}", case.name);
    }
}

#[test]
fn covers_every_op() {
    let names: Vec<&str> = cases().iter().map(|c| c.name).collect();
    for op in [
        "matmul",
        "transpose",
        "add",
        "sub",
        "mul",
        "mul(x, x)",
        "scale",
        "leaky_relu",
        "sigmoid",
        "sum",
        "mean",
        "l2_normalize",
        "conv2d",
        "upsample_nearest",
        "add_bias",
        "reshape",
        "concat",
        "narrow",
        "cross_entropy",
        "bce_with_logits",
    ] {
        assert!(names.contains(&op), "no case for {op}");
    }
}
