//! One entry point per run mode, shared by the command line tool and the
//! test suite. Every mode produces a human readable report, a CSV body, and
//! a verdict. Modes with a built in tolerance (equiv, gradcheck) set `ok`
//! false when the tolerance is violated; measurement modes always pass and
//! leave judgement to the caller.

use crate::bench;
use crate::config::{Mode, RunConfig};
use crate::cost::{self, ModelVariant};
use crate::error::Result;
use crate::gating::GateLevel;
use crate::oracle;
use crate::train;

/// Number of configurations in the equivalence sweep run by `Mode::Equiv`.
pub const EQUIV_CASES: usize = 50;

/// Central-difference step used by `Mode::Gradcheck`.
pub const GRADCHECK_EPS: f64 = 1e-6;

/// Largest per-coordinate relative error the gradcheck mode accepts.
pub const GRADCHECK_TOL: f64 = 1e-5;

/// Largest forward gap the equivalence mode accepts between output mixing
/// (activation outside) and the merged expert.
pub const EQUIV_TOL: f64 = 1e-10;

/// Smallest gap the committed Relu witness must show against inside mixing.
pub const WITNESS_FLOOR: f64 = 1e-3;

pub const FLOPS_CSV_HEADER: &str = "variant,level,m,backbone_flops,expert_forward_flops,\
                                    gating_flops,merging_flops,mixing_flops,bottleneck_flops,total_flops";

pub const EQUIV_CSV_HEADER: &str =
    "case,level,renormalize,activation,s,n,m,d_in,d_out,max_abs_gap,mean_abs_gap";

pub const GRADCHECK_CSV_HEADER: &str = "case,max_rel_err,coords";

/// What one mode run produced. `report` is for stdout, `csv` for the output
/// file. When `ok` is false, `failure` holds a one line explanation.
#[derive(Debug, Clone)]
pub struct ModeOutput {
    pub report: String,
    pub csv: String,
    pub ok: bool,
    pub failure: Option<String>,
}

impl ModeOutput {
    fn pass(report: String, csv: String) -> Self {
        ModeOutput { report, csv, ok: true, failure: None }
    }
}

/// Resolves the config (filling mode defaults) and runs its mode.
pub fn execute(cfg: &RunConfig) -> Result<ModeOutput> {
    let cfg = cfg.clone().effective()?;
    match cfg.mode {
        Mode::Flops => run_flops(&cfg),
        Mode::Bench => run_bench(&cfg),
        Mode::Equiv => run_equiv(&cfg),
        Mode::Gradcheck => run_gradcheck(),
        Mode::TrainToy => run_train_toy(&cfg),
    }
}

/// Cost-model sweep: for every m in the sweep, one row each for the dense
/// baseline, output mixing, and parameter merging on the configured shape.
/// Token-level profiles use the token-level merged variant (bottleneck plus
/// one routing decision per sequence); every other level uses the plain one.
fn run_flops(cfg: &RunConfig) -> Result<ModeOutput> {
    let base = cfg.profile();
    let merged = if base.level == GateLevel::Token {
        ModelVariant::MeoToken
    } else {
        ModelVariant::Meo
    };
    let variants = [ModelVariant::Vanilla, ModelVariant::Moe, merged];

    let mut csv = String::from(FLOPS_CSV_HEADER);
    csv.push('\n');
    let mut report = format!(
        "exact forward FLOPs, {} layers, d_model {}, d_ff {}, seq_len {}, {} experts, {} routing\n\n",
        base.layers, base.d_model, base.d_ff, base.seq_len, base.n_experts, base.level.name(),
    );
    report.push_str(&format!(
        "{:<10} {:>4}  {:>15} {:>15} {:>12} {:>13} {:>12} {:>12}  {:>15} {:>10}\n",
        "variant", "m", "backbone", "experts", "gating", "merging", "mixing", "bottleneck",
        "total", "gflops",
    ));
    for &m in cfg.m_sweep() {
        for variant in variants {
            let mut p = base.clone();
            p.variant = variant;
            p.m_selected = m;
            let c = cost::total_flops(&p)?;
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                variant.name(),
                p.level.name(),
                m,
                c.backbone_flops,
                c.expert_forward_flops,
                c.gating_flops,
                c.merging_flops,
                c.mixing_flops,
                c.bottleneck_flops,
                c.total_flops,
            ));
            report.push_str(&format!(
                "{:<10} {:>4}  {:>15} {:>15} {:>12} {:>13} {:>12} {:>12}  {:>15} {:>10.3}\n",
                variant.name(),
                m,
                c.backbone_flops,
                c.expert_forward_flops,
                c.gating_flops,
                c.merging_flops,
                c.mixing_flops,
                c.bottleneck_flops,
                c.total_flops,
                cost::gflops(c.total_flops),
            ));
        }
    }
    Ok(ModeOutput::pass(report, csv))
}

/// Wall-clock comparison of the two forward paths over the m sweep, plus a
/// growth summary relating measured medians to the layer cost model.
fn run_bench(cfg: &RunConfig) -> Result<ModeOutput> {
    let rows = bench::run_bench(cfg)?;
    let csv = bench::rows_to_csv(&rows);

    let p = cfg.profile();
    let mut report = format!(
        "forward latency, d {}, d_ff {}, s {}, {} experts, {} routing, {} precision, {} repeats\n\n",
        p.d_model,
        p.d_ff,
        p.seq_len,
        p.n_experts,
        p.level.name(),
        cfg.precision.name(),
        cfg.repeats,
    );
    report.push_str(&format!(
        "{:<10} {:>4} {:>14} {:>12} {:>12} {:>12}\n",
        "method", "m", "flops_model", "median_ms", "p10_ms", "p90_ms",
    ));
    for r in &rows {
        report.push_str(&format!(
            "{:<10} {:>4} {:>14} {:>12.4} {:>12.4} {:>12.4}\n",
            r.method, r.m, r.flops_model, r.wall_ms_median, r.wall_ms_p10, r.wall_ms_p90,
        ));
    }

    // Growth from the smallest to the largest m, per method.
    let mut methods: Vec<&str> = Vec::new();
    for r in &rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let mut summary = String::new();
    for name in methods {
        let of_method: Vec<_> = rows.iter().filter(|r| r.method == name).collect();
        let lo = of_method.iter().min_by_key(|r| r.m).expect("method has rows");
        let hi = of_method.iter().max_by_key(|r| r.m).expect("method has rows");
        if lo.m == hi.m {
            continue;
        }
        summary.push_str(&format!(
            "{}: median grew {:.2}x from m={} to m={} (model predicts {:.2}x)\n",
            name,
            hi.wall_ms_median / lo.wall_ms_median,
            lo.m,
            hi.m,
            hi.flops_model as f64 / lo.flops_model as f64,
        ));
    }
    if !summary.is_empty() {
        report.push('\n');
        report.push_str(&summary);
    }
    Ok(ModeOutput::pass(report, csv))
}

/// Seeded equivalence sweep plus the committed inequivalence witness.
/// Fails when any sweep case opens a gap beyond `EQUIV_TOL`, when the Relu
/// inside-activation witness fails to exceed `WITNESS_FLOOR`, or when the
/// identity control on the same weights exceeds `EQUIV_TOL`.
fn run_equiv(cfg: &RunConfig) -> Result<ModeOutput> {
    let outcomes = oracle::equivalence_suite(EQUIV_CASES, cfg.seed)?;
    let (relu, identity) = oracle::inequivalence_witness()?;

    let mut csv = String::from(EQUIV_CSV_HEADER);
    csv.push('\n');
    let mut report = format!(
        "merged expert vs output mixing (activation outside), {} seeded cases, base seed {}\n\n",
        EQUIV_CASES, cfg.seed,
    );
    let mut ok = true;
    let mut failure = None;
    for o in &outcomes {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{:e},{:e}\n",
            o.case,
            o.level,
            o.renormalize,
            o.activation,
            o.s,
            o.n,
            o.m,
            o.d_in,
            o.d_out,
            o.report.max_abs_gap,
            o.report.mean_abs_gap,
        ));
        report.push_str(&format!(
            "{:<68} max {:>9.3e}  mean {:>9.3e}\n",
            o.label, o.report.max_abs_gap, o.report.mean_abs_gap,
        ));
        if ok && o.report.max_abs_gap > EQUIV_TOL {
            ok = false;
            failure = Some(format!(
                "equivalence gap {:.3e} exceeds {:.0e} ({})",
                o.report.max_abs_gap, EQUIV_TOL, o.label,
            ));
        }
    }

    let (s, d_in, d_out, n, m) = oracle::WITNESS_SHAPE;
    for (name, activation, rep) in
        [("witness_relu_inside", "relu", &relu), ("witness_identity_inside", "identity", &identity)]
    {
        csv.push_str(&format!(
            "{},sequence,true,{},{},{},{},{},{},{:e},{:e}\n",
            name, activation, s, n, m, d_in, d_out, rep.max_abs_gap, rep.mean_abs_gap,
        ));
    }
    report.push_str(&format!(
        "\nwitness: relu inside mixing vs merged      max {:>9.3e} (must exceed {:.0e})\n",
        relu.max_abs_gap, WITNESS_FLOOR,
    ));
    report.push_str(&format!(
        "witness: identity inside mixing vs merged  max {:>9.3e} (must stay within {:.0e})\n",
        identity.max_abs_gap, EQUIV_TOL,
    ));
    if ok && relu.max_abs_gap <= WITNESS_FLOOR {
        ok = false;
        failure = Some(format!(
            "relu inside-activation witness gap {:.3e} does not exceed {:.0e}",
            relu.max_abs_gap, WITNESS_FLOOR,
        ));
    }
    if ok && identity.max_abs_gap > EQUIV_TOL {
        ok = false;
        failure = Some(format!(
            "identity witness gap {:.3e} exceeds {:.0e}",
            identity.max_abs_gap, EQUIV_TOL,
        ));
    }

    let within = outcomes.iter().filter(|o| o.report.max_abs_gap <= EQUIV_TOL).count();
    report.push_str(&format!(
        "\nsummary: {}/{} cases within {:.0e}; verdict {}\n",
        within,
        outcomes.len(),
        EQUIV_TOL,
        if ok { "PASS" } else { "FAIL" },
    ));
    Ok(ModeOutput { report, csv, ok, failure })
}

/// Central-difference check of every analytic gradient on the fixed fixture.
/// Fails when any case's worst per-coordinate relative error exceeds
/// `GRADCHECK_TOL`.
fn run_gradcheck() -> Result<ModeOutput> {
    let reports = oracle::gradcheck_suite(GRADCHECK_EPS)?;

    let mut csv = String::from(GRADCHECK_CSV_HEADER);
    csv.push('\n');
    let mut report = format!(
        "analytic vs central-difference gradients, eps {:.0e}, tolerance {:.0e}\n\n",
        GRADCHECK_EPS, GRADCHECK_TOL,
    );
    let mut ok = true;
    let mut failure = None;
    for r in &reports {
        csv.push_str(&format!("{},{:e},{}\n", r.label, r.max_rel_err, r.coords));
        report.push_str(&format!(
            "{:<55} max rel err {:>9.3e} over {:>4} coordinates\n",
            r.label, r.max_rel_err, r.coords,
        ));
        if ok && r.max_rel_err > GRADCHECK_TOL {
            ok = false;
            failure = Some(format!(
                "gradient relative error {:.3e} exceeds {:.0e} ({})",
                r.max_rel_err, GRADCHECK_TOL, r.label,
            ));
        }
    }
    let within = reports.iter().filter(|r| r.max_rel_err <= GRADCHECK_TOL).count();
    report.push_str(&format!(
        "\nsummary: {}/{} cases within {:.0e}; verdict {}\n",
        within,
        reports.len(),
        GRADCHECK_TOL,
        if ok { "PASS" } else { "FAIL" },
    ));
    Ok(ModeOutput { report, csv, ok, failure })
}

/// Trains both forward paths on the same synthetic clusters and reports the
/// per-method trajectory plus how far the two loss curves drift apart.
fn run_train_toy(cfg: &RunConfig) -> Result<ModeOutput> {
    let rows = train::run_train_toy(cfg)?;
    let csv = train::rows_to_csv(&rows);

    let mut report = format!(
        "synthetic cluster training, {} classes, {} samples per class, {} epochs, lr {}\n\n",
        cfg.toy.classes, cfg.toy.per_class, cfg.toy.epochs, cfg.toy.learning_rate,
    );
    report.push_str(&format!(
        "{:<10} {:>7} {:>14} {:>10}\n",
        "method", "epochs", "final_loss", "final_acc",
    ));
    let mut methods: Vec<&str> = Vec::new();
    for r in &rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    for name in &methods {
        if let Some(last) = rows.iter().filter(|r| r.method == *name).last() {
            report.push_str(&format!(
                "{:<10} {:>7} {:>14.6} {:>10.4}\n",
                name, last.epoch, last.loss, last.accuracy,
            ));
        }
    }
    if methods.len() == 2 {
        let a: Vec<_> = rows.iter().filter(|r| r.method == methods[0]).collect();
        let b: Vec<_> = rows.iter().filter(|r| r.method == methods[1]).collect();
        let mut worst = 0f64;
        for (ra, rb) in a.iter().zip(b.iter()) {
            worst = worst.max((ra.loss - rb.loss).abs());
        }
        report.push_str(&format!(
            "\nlargest per-epoch loss gap between {} and {}: {:.3e}\n",
            methods[0], methods[1], worst,
        ));
    }
    Ok(ModeOutput::pass(report, csv))
}
