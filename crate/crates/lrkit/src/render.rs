//! Tables and plots for each artifact kind and for the run store.

use std::collections::BTreeMap;

use lrkit_core::ingest::RunRecord;
use lrkit_core::micro::{CoordStats, Parametrization};
use lrkit_core::modsearch::ModuleGroup;
use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::artifact::Kind;
use crate::records::*;
use crate::report::{num, opt, Plot, Report, Series, Table};

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("artifact body does not match its kind `{kind}`: {message}")]
    Body { kind: String, message: String },
    #[error("no report is defined for `{0}` artifacts")]
    Unsupported(String),
}

fn body<T: DeserializeOwned>(kind: Kind, value: &Value) -> Result<T, RenderError> {
    serde_json::from_value(value.clone()).map_err(|e| RenderError::Body {
        kind: kind.name().into(),
        message: e.to_string(),
    })
}

fn plot(
    name: &str,
    title: &str,
    x: &str,
    y: &str,
    log_x: bool,
    log_y: bool,
    series: Vec<Series>,
) -> Plot {
    Plot {
        name: name.into(),
        title: title.into(),
        x_label: x.into(),
        y_label: y.into(),
        log_x,
        log_y,
        series,
    }
}

/// Report for one artifact, dispatched on its `kind` field.
pub fn render_artifact(kind_name: &str, value: &Value) -> Result<Report, RenderError> {
    let kind =
        Kind::from_name(kind_name).ok_or_else(|| RenderError::Unsupported(kind_name.into()))?;
    match kind {
        Kind::PowerLaw => Ok(power_law(&body(kind, value)?)),
        Kind::QuadLog => Ok(quad_log(&body(kind, value)?)),
        Kind::LrLaw => Ok(lr_law(&body(kind, value)?)),
        Kind::SearchPlan => Ok(search_plan(&body(kind, value)?)),
        Kind::ModuleLrTable => Ok(module_table(&body(kind, value)?)),
        Kind::TransferPlan => Ok(transfer_plan(&body(kind, value)?)),
        Kind::Trace => Ok(trace(&body(kind, value)?)),
        Kind::CoordCheck => Ok(coordcheck(&body(kind, value)?)),
        Kind::SurfaceSpec => Ok(surface(&body(kind, value)?)),
        Kind::Ingest => Ok(ingest(&body(kind, value)?)),
    }
}

fn power_law(r: &PowerLawRecord) -> Report {
    let fit = r.to_fit();
    let mut t = Table::new("curve", &["tokens", "loss", "fitted", "used"]);
    for s in &r.samples {
        t.push(vec![
            s.tokens.to_string(),
            num(s.loss),
            num(fit.predict(s.tokens as f64)),
            (s.tokens >= r.min_tokens).to_string(),
        ]);
    }
    let mut tables = vec![t];
    if !r.resampled.is_empty() {
        let mut rs = Table::new("resampled", &["tokens", "loss"]);
        for s in &r.resampled {
            rs.push(vec![s.tokens.to_string(), num(s.loss)]);
        }
        tables.push(rs);
    }
    let observed = Series {
        label: "observed".into(),
        points: r
            .samples
            .iter()
            .map(|s| (s.tokens as f64, s.loss))
            .collect(),
    };
    let fitted = Series {
        label: "fit".into(),
        points: r
            .samples
            .iter()
            .filter(|s| s.tokens >= r.min_tokens)
            .map(|s| (s.tokens as f64, fit.predict(s.tokens as f64)))
            .collect(),
    };
    Report {
        tables,
        plots: vec![plot(
            "curve",
            &format!("L(D) fit, run {}", r.run_id),
            "tokens",
            "loss",
            true,
            false,
            vec![observed, fitted],
        )],
    }
}

fn quad_log(r: &QuadLogRecord) -> Report {
    let fit = r.to_fit();
    let mut t = Table::new("points", &["lr", "loss", "fitted"]);
    for &(lr, loss) in &r.points {
        t.push(vec![num(lr), num(loss), num(fit.predict(lr))]);
    }
    let (lo, hi) = r
        .points
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), p| {
            (lo.min(p.0), hi.max(p.0))
        });
    let curve: Vec<(f64, f64)> = (0..=40)
        .map(|k| lo * (hi / lo).powf(k as f64 / 40.0))
        .map(|lr| (lr, fit.predict(lr)))
        .collect();
    Report {
        tables: vec![t],
        plots: vec![plot(
            "points",
            &format!("loss vs LR, optimum {:.4e}", r.eta_star),
            "learning rate",
            "loss",
            true,
            false,
            vec![
                Series {
                    label: "observed".into(),
                    points: r.points.clone(),
                },
                Series {
                    label: "quadratic fit".into(),
                    points: curve,
                },
            ],
        )],
    }
}

fn lr_law(r: &LrLawRecord) -> Report {
    let law = r.to_law();
    let mut t = Table::new("optima", &["n", "d", "eta_star", "predicted", "source_r2"]);
    let mut by_n: BTreeMap<u64, (Vec<(f64, f64)>, Vec<(f64, f64)>)> = BTreeMap::new();
    for p in &r.points {
        let pred = law.predict(p.n / r.units.n_scale, p.d / r.units.d_scale);
        t.push(vec![
            num(p.n),
            num(p.d),
            num(p.eta_star),
            num(pred),
            num(p.source_r2),
        ]);
        let e = by_n.entry(p.n as u64).or_default();
        e.0.push((p.d, p.eta_star));
        e.1.push((p.d, pred));
    }
    let mut law_t = Table::new(
        "law",
        &[
            "C_eta", "alpha_N", "beta_D", "n_scale", "d_scale", "r2", "rmse", "n_points",
        ],
    );
    law_t.push(vec![
        num(r.c_eta),
        num(r.alpha_n),
        num(r.beta_d),
        num(r.units.n_scale),
        num(r.units.d_scale),
        num(r.r2),
        num(r.rmse),
        r.n_points.to_string(),
    ]);
    let mut series = Vec::new();
    for (n, (obs, pred)) in by_n {
        let label = format!("N={:.2}B", n as f64 / 1e9);
        series.push(Series {
            label: format!("{label} optimum"),
            points: obs,
        });
        series.push(Series {
            label: format!("{label} law"),
            points: pred,
        });
    }
    Report {
        tables: vec![t, law_t],
        plots: vec![plot(
            "optima",
            "optimal LR vs tokens",
            "tokens",
            "optimal LR",
            true,
            true,
            series,
        )],
    }
}

fn search_plan(r: &SearchPlanRecord) -> Report {
    let mut stages = Table::new(
        "stages",
        &["stage", "group", "lr", "loss", "optimum", "fallback"],
    );
    let mut series = Vec::new();
    for (i, s) in r.plan.results.iter().enumerate() {
        for &(lr, loss) in &s.points {
            stages.push(vec![
                i.to_string(),
                s.group.key().into(),
                num(lr),
                num(loss),
                num(s.optimum),
                s.fallback.to_string(),
            ]);
        }
        series.push(Series {
            label: s.group.key().into(),
            points: s.points.clone(),
        });
    }
    let mut next = Table::new(
        "next_configs",
        &[
            "stage",
            "group",
            "lr",
            "embedding",
            "hidden",
            "router",
            "lm_head",
            "tokens",
        ],
    );
    for c in &r.next_configs {
        let g = |m: ModuleGroup| opt(c.module_lrs.get(&m).copied());
        next.push(vec![
            c.stage.to_string(),
            c.group.key().into(),
            num(c.lr),
            g(ModuleGroup::Embedding),
            g(ModuleGroup::Hidden),
            g(ModuleGroup::Router),
            g(ModuleGroup::LmHead),
            c.tokens.to_string(),
        ]);
    }
    Report {
        tables: vec![stages, next],
        plots: vec![plot(
            "stages",
            &format!("module search, {}", r.plan.shape.name),
            "learning rate",
            "loss",
            true,
            false,
            series,
        )],
    }
}

fn module_table(r: &ModuleTableRecord) -> Report {
    let mut t = Table::new(
        "table",
        &[
            "model",
            "total_params",
            "global_lr",
            "lm_head",
            "router",
            "hidden",
            "embedding",
            "fallbacks",
            "global_loss",
            "module_min_loss",
            "delta_loss",
        ],
    );
    for row in &r.table.rows {
        let g = |m: ModuleGroup| opt(row.optima.get(&m).copied());
        t.push(vec![
            row.model.clone(),
            row.total_params.to_string(),
            num(row.global_lr),
            g(ModuleGroup::LmHead),
            g(ModuleGroup::Router),
            g(ModuleGroup::Hidden),
            g(ModuleGroup::Embedding),
            row.fallbacks
                .iter()
                .map(|f| f.key())
                .collect::<Vec<_>>()
                .join(";"),
            opt(row.global_loss),
            num(row.module_min_loss),
            opt(row.delta_loss),
        ]);
    }
    Report {
        tables: vec![t],
        plots: vec![],
    }
}

fn transfer_plan(r: &TransferPlanRecord) -> Report {
    let mut t = Table::new(
        "multipliers",
        &[
            "group",
            "init_var",
            "lr",
            "eps",
            "wd",
            "init_var_exact",
            "lr_exact",
            "eps_exact",
            "wd_exact",
        ],
    );
    let exact =
        |m: &lrkit_core::mutransfer::Multiplier| m.exact.map(|e| e.to_string()).unwrap_or_default();
    for (g, m) in &r.plan.groups {
        t.push(vec![
            g.key().into(),
            num(m.init_var.value),
            num(m.lr.value),
            opt(m.eps.as_ref().map(|e| e.value)),
            num(m.wd.value),
            exact(&m.init_var),
            exact(&m.lr),
            m.eps.as_ref().map(exact).unwrap_or_default(),
            exact(&m.wd),
        ]);
    }
    t.push(vec![
        "residual".into(),
        String::new(),
        num(r.plan.residual_mult.value),
        String::new(),
        String::new(),
        String::new(),
        exact(&r.plan.residual_mult),
        String::new(),
        String::new(),
    ]);
    let mut tables = vec![t];
    if let Some(applied) = &r.applied {
        let mut a = Table::new("applied", &["group", "init_std", "lr", "eps", "wd"]);
        for (g, h) in applied {
            a.push(vec![
                g.key().into(),
                num(h.init_std),
                num(h.lr),
                opt(h.eps),
                num(h.wd),
            ]);
        }
        tables.push(a);
    }
    Report {
        tables,
        plots: vec![],
    }
}

fn trace(r: &TraceRecord) -> Report {
    let mut losses = Table::new("loss", &["step", "loss"]);
    for (i, l) in r.trace.losses.iter().enumerate() {
        losses.push(vec![(i + 1).to_string(), num(*l)]);
    }
    let mut rms = Table::new("update_rms", &["step", "tensor", "kind", "layer", "rms"]);
    for c in &r.trace.checkpoints {
        for t in &c.update_rms {
            rms.push(vec![
                c.step.to_string(),
                t.name.clone(),
                format!("{:?}", t.kind),
                t.layer.map(|l| l.to_string()).unwrap_or_default(),
                num(t.rms),
            ]);
        }
    }
    let mut layers = Table::new("layer_rms", &["step", "layer", "rms"]);
    for c in &r.trace.checkpoints {
        for (l, v) in c.layer_rms.iter().enumerate() {
            layers.push(vec![c.step.to_string(), l.to_string(), num(*v)]);
        }
    }
    let mut tables = vec![losses, rms, layers];
    let coords: Vec<&CoordStats> = r
        .trace
        .checkpoints
        .iter()
        .filter_map(|c| c.coord.as_ref())
        .collect();
    if !coords.is_empty() {
        tables.push(coord_table(
            "coord",
            coords.iter().map(|c| (r.config.width, *c)),
        ));
    }
    let loss_series = Series {
        label: "train loss".into(),
        points: r
            .trace
            .losses
            .iter()
            .enumerate()
            .map(|(i, l)| ((i + 1) as f64, *l))
            .collect(),
    };
    let mut layer_series: Vec<Series> = (0..r.config.depth)
        .map(|l| Series {
            label: format!("layer {l}"),
            points: r
                .trace
                .checkpoints
                .iter()
                .filter_map(|c| c.layer_rms.get(l).map(|v| (c.step as f64, *v)))
                .collect(),
        })
        .collect();
    layer_series.retain(|s| !s.points.is_empty());
    Report {
        tables,
        plots: vec![
            plot(
                "loss",
                "training loss",
                "step",
                "loss",
                false,
                false,
                vec![loss_series],
            ),
            plot(
                "layer_rms",
                "update RMS per layer",
                "step",
                "update RMS",
                false,
                false,
                layer_series,
            ),
        ],
    }
}

fn coord_table<'a>(name: &str, rows: impl Iterator<Item = (usize, &'a CoordStats)>) -> Table {
    let mut t = Table::new(
        name,
        &[
            "width",
            "step",
            "std_embed",
            "std_attn_logits",
            "std_logits",
        ],
    );
    for (w, c) in rows {
        t.push(vec![
            w.to_string(),
            c.step.to_string(),
            num(c.std_embed),
            num(c.std_attn_logits),
            num(c.std_logits),
        ]);
    }
    t
}

fn coordcheck(r: &CoordCheckRecord) -> Report {
    let rep = &r.report;
    let stats = coord_table(
        "coord",
        rep.series
            .iter()
            .flat_map(|s| s.stats.iter().map(move |c| (s.width, c))),
    );
    let mut trends = Table::new(
        "trends",
        &[
            "step",
            "rho_embed",
            "rho_attn_logits",
            "rho_logits",
            "logits_spread",
            "attn_spread",
        ],
    );
    for p in &rep.trends {
        trends.push(vec![
            p.step.to_string(),
            opt(p.rho_embed),
            opt(p.rho_attn_logits),
            opt(p.rho_logits),
            opt(p.logits_spread),
            opt(p.attn_spread),
        ]);
    }
    let mut tables = vec![stats, trends];
    if let Some(series) = &r.step_series {
        let w = rep.series.first().map(|s| s.width).unwrap_or_default();
        tables.push(coord_table("step_series", series.iter().map(|c| (w, c))));
    }
    let label = match rep.parametrization {
        Parametrization::Sp => "SP",
        Parametrization::MupComplete => "muP",
    };
    let site = |name: &str, f: fn(&CoordStats) -> f64, title: &str| {
        let series = rep
            .series
            .iter()
            .map(|s| Series {
                label: format!("width {}", s.width),
                points: s
                    .stats
                    .iter()
                    .filter(|c| c.step > 0)
                    .map(|c| (c.step as f64, f(c)))
                    .collect(),
            })
            .collect();
        plot(
            name,
            &format!("{title} ({label})"),
            "step",
            "std(x_t - x_0)",
            false,
            true,
            series,
        )
    };
    let final_step = rep.trends.last().map(|t| t.step).unwrap_or_default();
    let by_width = |f: fn(&CoordStats) -> f64| -> Vec<(f64, f64)> {
        rep.series
            .iter()
            .filter_map(|s| {
                s.stats
                    .iter()
                    .find(|c| c.step == final_step)
                    .map(|c| (s.width as f64, f(c)))
            })
            .collect()
    };
    let widths = plot(
        "widths",
        &format!("coordinate drift at step {final_step} ({label})"),
        "width",
        "std(x_t - x_0)",
        true,
        true,
        vec![
            Series {
                label: "embeddings".into(),
                points: by_width(|c| c.std_embed),
            },
            Series {
                label: "attention logits".into(),
                points: by_width(|c| c.std_attn_logits),
            },
            Series {
                label: "output logits".into(),
                points: by_width(|c| c.std_logits),
            },
        ],
    );
    Report {
        tables,
        plots: vec![
            site("embed", |c| c.std_embed, "embeddings"),
            site("attn_logits", |c| c.std_attn_logits, "attention logits"),
            site("logits", |c| c.std_logits, "output logits"),
            widths,
        ],
    }
}

fn surface(r: &SurfaceRecord) -> Report {
    let mut t = Table::new(
        "spec",
        &[
            "C_eta",
            "alpha_N",
            "beta_D",
            "A",
            "gamma",
            "C_curv",
            "noise_sigma",
            "seed",
            "n_shapes",
            "n_lr",
            "n_d",
        ],
    );
    t.push(vec![
        num(r.spec.c_eta),
        num(r.spec.alpha_n),
        num(r.spec.beta_d),
        num(r.spec.a),
        num(r.spec.gamma),
        num(r.spec.c_curv),
        num(r.spec.noise_sigma),
        r.spec.seed.to_string(),
        r.shapes.len().to_string(),
        r.lr_grid.len().to_string(),
        r.d_grid.len().to_string(),
    ]);
    Report {
        tables: vec![t],
        plots: vec![],
    }
}

fn ingest(r: &IngestRecord) -> Report {
    let mut t = Table::new("runs", &["run_id"]);
    for id in &r.run_ids {
        t.push(vec![id.clone()]);
    }
    Report {
        tables: vec![t],
        plots: vec![],
    }
}

/// Summary of the run store with every loss curve.
pub fn render_runs(runs: &[RunRecord]) -> Report {
    let mut t = Table::new(
        "runs",
        &[
            "run_id",
            "model",
            "total_params",
            "lr_global",
            "module_lrs",
            "n_samples",
            "last_tokens",
            "last_loss",
        ],
    );
    for r in runs {
        let modules = r
            .module_lrs
            .as_ref()
            .map(|m| {
                m.iter()
                    .map(|(g, v)| format!("{}={v}", g.key()))
                    .collect::<Vec<_>>()
                    .join(";")
            })
            .unwrap_or_default();
        let last = r.samples.last();
        t.push(vec![
            r.run_id.clone(),
            r.model.name.clone(),
            r.model.total_params.to_string(),
            num(r.lr_global),
            modules,
            r.samples.len().to_string(),
            last.map(|s| s.tokens.to_string()).unwrap_or_default(),
            opt(last.map(|s| s.loss)),
        ]);
    }
    let series = runs
        .iter()
        .map(|r| Series {
            label: r.run_id.clone(),
            points: r
                .samples
                .iter()
                .map(|s| (s.tokens as f64, s.loss))
                .collect(),
        })
        .collect();
    Report {
        tables: vec![t],
        plots: vec![plot(
            "curves",
            "validation loss",
            "tokens",
            "loss",
            true,
            false,
            series,
        )],
    }
}
