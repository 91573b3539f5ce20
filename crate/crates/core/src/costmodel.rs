//! Closed-form costs: the published CT×PT table for five methods, the
//! asymptotic CT×CT classes, and exact per-step counts of this
//! implementation with a validator against measured runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::OpCounter;
use crate::error::{Error, Result};
use crate::linear::{cpmm_mults, cpvm_counts, dense_group};
use crate::model::{ModelConfig, RunReport};
use crate::stats::loglog_exponent;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Gazelle,
    Iron,
    Bolt,
    Thor,
    CryptoGen,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Gazelle,
        Method::Iron,
        Method::Bolt,
        Method::Thor,
        Method::CryptoGen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gazelle => "Gazelle",
            Method::Iron => "IRON",
            Method::Bolt => "BOLT",
            Method::Thor => "THOR",
            Method::CryptoGen => "CryptoGen",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    Prefill,
    Gen,
    Total,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Prefill, Stage::Gen, Stage::Total];
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "prefill" => Ok(Stage::Prefill),
            "gen" | "generation" | "decode" => Ok(Stage::Gen),
            "total" => Ok(Stage::Total),
            _ => Err(Error::InvalidParams(format!("unknown stage {s}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub m: usize,
    pub d1: usize,
    pub d2: usize,
    pub n: usize,
    pub k: usize,
}

impl Dims {
    /// Dimensions of the published comparison.
    pub const TABLE: Dims = Dims {
        m: 128,
        d1: 768,
        d2: 64,
        n: 8192,
        k: 5,
    };

    fn validate(&self) -> Result<()> {
        if [self.m, self.d1, self.d2, self.n].contains(&0) {
            return Err(Error::InvalidParams("cost dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// One cost cell: the printed asymptotic form evaluated with unit
/// constant, plus the published number when it differs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cost {
    pub formula: String,
    pub value: f64,
    pub reported: Option<u64>,
    /// Another closed form that does give the published number.
    pub note: Option<String>,
}

impl Cost {
    pub fn reproduces(&self) -> bool {
        self.reported.is_none()
    }

    /// Published value if the formula misses it, else the rounded formula.
    pub fn table_value(&self) -> u64 {
        self.reported.unwrap_or(self.value.round() as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTriple {
    pub mult: Cost,
    pub rot: Cost,
    pub ct: Cost,
}

/// Published Mult/Rot/Ct numbers at [`Dims::TABLE`], per stage.
fn published(method: Method) -> [[u64; 3]; 3] {
    // [mult, rot, ct] x [prefill, gen, total]
    match method {
        Method::Gazelle => [[98304, 491520, 589824], [96768, 483840, 580608], [1664, 8320, 9984]],
        Method::Iron => [[768, 3840, 4608], [0, 0, 0], [56, 280, 336]],
        Method::Bolt => [[768, 3840, 4608], [43, 215, 258], [12, 60, 72]],
        Method::Thor => [[9908, 49540, 59448], [282, 1410, 1692], [13, 65, 78]],
        Method::CryptoGen => [[768, 320, 1088], [43, 25, 68], [12, 5, 17]],
    }
}

fn alternative(method: Method, metric: usize, stage: Stage) -> Option<&'static str> {
    match (method, metric, stage) {
        (Method::Gazelle, 2, _) => Some("m(d1+d2)/d2 = 1664 per pass"),
        (Method::CryptoGen, 0, Stage::Gen) => Some("next_pow2(d2) = 64 CPVM multiplications per step"),
        _ => None,
    }
}

/// Evaluates one row of the CT×PT comparison.
pub fn predict_costs(method: Method, stage: Stage, dims: Dims) -> Result<CostTriple> {
    dims.validate()?;
    if stage == Stage::Total {
        let p = predict_costs(method, Stage::Prefill, dims)?;
        let g = predict_costs(method, Stage::Gen, dims)?;
        let sum = |a: &Cost, b: &Cost, metric: usize| {
            Cost {
                formula: format!("({}) + ({})", a.formula, b.formula),
                value: a.value + b.value,
                reported: None,
                note: None,
            }
            .annotate(method, metric, stage, dims)
        };
        return Ok(CostTriple {
            mult: sum(&p.mult, &g.mult, 0),
            rot: sum(&p.rot, &g.rot, 1),
            ct: sum(&p.ct, &g.ct, 2),
        });
    }
    let (m, d1, d2, n, k) = (
        dims.m as f64,
        dims.d1 as f64,
        dims.d2 as f64,
        dims.n as f64,
        dims.k as f64,
    );
    let gen = stage == Stage::Gen;
    let times_k = |f: &str, v: f64| {
        if gen {
            (format!("{f}·k"), v * k)
        } else {
            (f.to_string(), v)
        }
    };
    let mdd = m * d1 * d2 / n;
    let (mult, rot, ct) = match method {
        Method::Gazelle => (
            times_k("m·d1", m * d1),
            times_k("m·d1", m * d1),
            times_k("m·d1/d2", m * d1 / d2),
        ),
        Method::Iron => (
            times_k("m·d1·d2/n", mdd),
            ("0".to_string(), 0.0),
            times_k("sqrt(m·d1·d2/n)", mdd.sqrt()),
        ),
        Method::Bolt => (
            times_k("m·d1·d2/n", mdd),
            times_k("sqrt(m²·d1²·d2/n²)", (m * m * d1 * d1 * d2 / (n * n)).sqrt()),
            times_k("m(d1+d2)/n", m * (d1 + d2) / n),
        ),
        Method::Thor => (
            times_k("m·d1·d2/n", mdd),
            times_k("d2 + m·d1/n", d2 + m * d1 / n),
            times_k("m·d1/n", m * d1 / n),
        ),
        Method::CryptoGen if gen => (
            ("d1·d2/n·k".to_string(), d1 * d2 / n * k),
            ("log2(d1)·k".to_string(), d1.log2() * k),
            ("ceil(d1/n)·k".to_string(), (d1 / n).ceil() * k),
        ),
        // Input ciphertexts of the dense outer packing; the printed
        // m(d1+d2)/n gives 13 at the published dims.
        Method::CryptoGen => (
            ("m·d1·d2/n".to_string(), mdd),
            (
                "sqrt(m²·d1²·d2/n²)".to_string(),
                (m * m * d1 * d1 * d2 / (n * n)).sqrt(),
            ),
            ("m·d1/n".to_string(), m * d1 / n),
        ),
    };
    let cell = |(formula, value): (String, f64), metric: usize| {
        Cost {
            formula,
            value,
            reported: None,
            note: None,
        }
        .annotate(method, metric, stage, dims)
    };
    Ok(CostTriple {
        mult: cell(mult, 0),
        rot: cell(rot, 1),
        ct: cell(ct, 2),
    })
}

impl Cost {
    fn annotate(mut self, method: Method, metric: usize, stage: Stage, dims: Dims) -> Cost {
        if dims != Dims::TABLE {
            return self;
        }
        let col = match stage {
            Stage::Prefill => 0,
            Stage::Gen => 1,
            Stage::Total => 2,
        };
        let paper = published(method)[metric][col];
        if (self.value - paper as f64).abs() > 1e-9 {
            self.reported = Some(paper);
            self.note = alternative(method, metric, stage).map(str::to_string);
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub method: Method,
    pub metric: String,
    pub stage: Stage,
    pub cost: Cost,
}

/// Every cell of the comparison at [`Dims::TABLE`].
pub fn table_cells() -> Vec<TableCell> {
    table_cells_at(Dims::TABLE, &Method::ALL).expect("table dims are valid")
}

/// Cells for `methods` at arbitrary dimensions.
pub fn table_cells_at(dims: Dims, methods: &[Method]) -> Result<Vec<TableCell>> {
    let mut out = Vec::new();
    for &method in methods {
        for stage in Stage::ALL {
            let t = predict_costs(method, stage, dims)?;
            for (metric, cost) in [("Mult", t.mult), ("Rot", t.rot), ("Ct", t.ct)] {
                out.push(TableCell {
                    method,
                    metric: metric.into(),
                    stage,
                    cost,
                });
            }
        }
    }
    Ok(out)
}

/// Cells whose published number the printed form does not produce.
pub fn reported_only() -> Vec<TableCell> {
    table_cells().into_iter().filter(|c| !c.cost.reproduces()).collect()
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Prefill => "Prefill",
        Stage::Gen => "Gen",
        Stage::Total => "Total",
    }
}

pub fn table_csv() -> String {
    cells_csv(&table_cells())
}

pub fn cells_csv(cells: &[TableCell]) -> String {
    let mut s = String::from("method,metric,stage,formula,formula_value,published,status,note\n");
    for c in cells {
        s.push_str(&format!(
            "{},{},{},\"{}\",{:.2},{},{},\"{}\"\n",
            c.method,
            c.metric,
            stage_name(c.stage),
            c.cost.formula,
            c.cost.value,
            c.cost.table_value(),
            if c.cost.reproduces() {
                "reproduced"
            } else {
                "reported-only"
            },
            c.cost.note.as_deref().unwrap_or("")
        ));
    }
    s
}

pub fn table_markdown() -> String {
    cells_markdown(&table_cells())
}

/// Markdown for `cells` followed by the CT×CT order table.
pub fn cells_markdown(cells: &[TableCell]) -> String {
    let mut s = String::from(
        "| Method | Metric | Stage | Formula | Formula value | Published | Status |\n|---|---|---|---|---:|---:|---|\n",
    );
    for c in cells {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {:.2} | {} | {} |\n",
            c.method,
            c.metric,
            stage_name(c.stage),
            c.cost.formula,
            c.cost.value,
            c.cost.table_value(),
            if c.cost.reproduces() {
                "reproduced"
            } else {
                "reported-only"
            }
        ));
    }
    s.push('\n');
    s.push_str(&attention_markdown());
    s
}

/// Asymptotic cost classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Order {
    LogD,
    D,
    K,
    K2,
    M2,
}

impl Order {
    /// Growth exponent in the sequence length.
    pub fn length_exponent(self) -> f64 {
        match self {
            Order::LogD | Order::D => 0.0,
            Order::K => 1.0,
            Order::K2 | Order::M2 => 2.0,
        }
    }
}

impl fmt::Display for Order {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Order::LogD => "O(log d)",
            Order::D => "O(d)",
            Order::K => "O(k)",
            Order::K2 => "O(k^2)",
            Order::M2 => "O(m^2)",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionOrders {
    pub rotation: Order,
    pub ctct: Order,
}

/// CT×CT attention classes per stage. Gazelle and IRON have no attention
/// row and are rejected.
pub fn predict_attention_costs(method: Method, stage: Stage) -> Result<AttentionOrders> {
    match (method, stage) {
        (Method::Gazelle | Method::Iron, _) | (_, Stage::Total) => Err(Error::UnknownMethod(format!(
            "{method} has no attention cost class for this stage"
        ))),
        (_, Stage::Prefill) => Ok(AttentionOrders {
            rotation: Order::D,
            ctct: Order::M2,
        }),
        (Method::CryptoGen, Stage::Gen) => Ok(AttentionOrders {
            rotation: Order::LogD,
            ctct: Order::K,
        }),
        (_, Stage::Gen) => Ok(AttentionOrders {
            rotation: Order::D,
            ctct: Order::K2,
        }),
    }
}

pub fn attention_markdown() -> String {
    let mut s = String::from("| Method | Prefill Rot | Prefill CT×CT | Gen Rot | Gen CT×CT |\n|---|---|---|---|---|\n");
    for method in [Method::Bolt, Method::Thor, Method::CryptoGen] {
        let p = predict_attention_costs(method, Stage::Prefill).expect("attention row");
        let g = predict_attention_costs(method, Stage::Gen).expect("attention row");
        s.push_str(&format!(
            "| {method} | {} | {} | {} | {} |\n",
            p.rotation, p.ctct, g.rotation, g.ctct
        ));
    }
    s
}

fn p2(v: usize) -> u64 {
    v.max(1).next_power_of_two() as u64
}

fn log2(v: usize) -> u64 {
    v.trailing_zeros() as u64
}

/// Exact CT×PT multiplications, CT×CT multiplications and rotations of
/// one cached decode step of this implementation. `t` is the generated
/// length after the step's append; `m` the prefill length.
pub fn predict_decode_step(cfg: &ModelConfig, n: usize, m: usize, t: usize) -> OpCounter {
    let (d1, hd, ffn) = (cfg.d_model, cfg.head_dim(), cfg.ffn_dim);
    let dp = hd.next_power_of_two();
    let blocks = n / dp;
    let parts = t.div_ceil(blocks) as u64;
    let has_pre = u64::from(m > 0);
    let (hd64, ln) = (hd as u64, log2(n));
    let cpvm = |a, b| cpvm_counts(a, b, n);
    let linear_mults = 5 * p2(d1) + p2(ffn);
    let linear_rots = 4 * cpvm(d1, d1).1 + cpvm(d1, ffn).1 + cpvm(ffn, d1).1;
    let append_rots = if (t - 1).is_multiple_of(blocks) { 0 } else { 2 };
    let head_rots =
        append_rots + has_pre * (hd64 * (1 + ln) + hd64 * ln) + log2(blocks) + parts * log2(dp) + log2(blocks);
    let per_layer = OpCounter {
        mult_plain: linear_mults + cfg.heads as u64 * (2 + has_pre * hd64),
        mult_cipher: cfg.heads as u64 * (2 * has_pre * hd64 + 2 * parts),
        rotate: linear_rots + cfg.heads as u64 * head_rots,
        ..OpCounter::default()
    };
    let layers = cfg.layers as u64;
    OpCounter {
        mult_plain: layers * per_layer.mult_plain + p2(cfg.vocab),
        mult_cipher: layers * per_layer.mult_cipher,
        rotate: layers * per_layer.rotate + cpvm(d1, cfg.vocab).1,
        ..OpCounter::default()
    }
}

fn cpmm_rotations(d_out: usize, g: usize) -> u64 {
    let d2p = d_out.next_power_of_two();
    if g >= d2p {
        (d2p - 1) as u64 + log2(g / d2p)
    } else {
        (d_out.div_ceil(g) * (g - 1)) as u64
    }
}

/// Exact counts of an `m`-token prefill (through the first token's logits).
pub fn predict_prefill(cfg: &ModelConfig, n: usize, m: usize) -> OpCounter {
    let (d1, hd, ffn) = (cfg.d_model, cfg.head_dim(), cfg.ffn_dim);
    let mm = |a: usize, b: usize| {
        let g = dense_group(m, a, n);
        (cpmm_mults(a, b, g), cpmm_rotations(b, g))
    };
    let layers = [mm(d1, d1), mm(d1, d1), mm(d1, d1), mm(d1, d1), mm(d1, ffn), mm(ffn, d1)];
    let lin_mult: u64 = layers.iter().map(|c| c.0).sum();
    let lin_rot: u64 = layers.iter().map(|c| c.1).sum();
    let heads = cfg.heads as u64;
    let md = (m * hd) as u64;
    let per_layer = OpCounter {
        mult_plain: lin_mult + heads * 2 * md,
        mult_cipher: heads * 2 * md,
        rotate: lin_rot + heads * 2 * md * (1 + log2(n)),
        ..OpCounter::default()
    };
    let l = cfg.layers as u64;
    OpCounter {
        mult_plain: l * per_layer.mult_plain + p2(cfg.vocab),
        mult_cipher: l * per_layer.mult_cipher,
        rotate: l * per_layer.rotate + cpvm_counts(d1, cfg.vocab, n).1,
        ..OpCounter::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub metric: String,
    pub predicted: f64,
    pub measured: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn discrepancies(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

/// Compares a cached-generation report against the exact per-step
/// predictions, and, with at least three steps, the cumulative CT×CT growth
/// exponent against the linear class.
pub fn validate_against_counts(report: &RunReport, cfg: &ModelConfig) -> Result<ValidationReport> {
    if report.method != "CryptoGen" {
        return Err(Error::InvalidParams(format!("cannot validate a {} run", report.method)));
    }
    if report.n_slots == 0 || report.prompt_len == 0 {
        return Err(Error::Dimension("report has no dimensions".into()));
    }
    let (n, m) = (report.n_slots, report.prompt_len);
    let mut checks = Vec::new();
    let mut exact = |metric: String, predicted: u64, measured: u64| {
        checks.push(Check {
            metric,
            predicted: predicted as f64,
            measured: measured as f64,
            tolerance: 0.0,
            pass: predicted == measured,
        })
    };
    let pre = predict_prefill(cfg, n, m);
    exact("prefill.mult_plain".into(), pre.mult_plain, report.prefill.mult_plain);
    exact(
        "prefill.mult_cipher".into(),
        pre.mult_cipher,
        report.prefill.mult_cipher,
    );
    exact("prefill.rotate".into(), pre.rotate, report.prefill.rotate);
    for s in &report.steps {
        let want = predict_decode_step(cfg, n, m, s.step as usize + 1);
        exact(
            format!("step{}.mult_plain", s.step),
            want.mult_plain,
            s.counters.mult_plain,
        );
        exact(
            format!("step{}.mult_cipher", s.step),
            want.mult_cipher,
            s.counters.mult_cipher,
        );
        exact(format!("step{}.rotate", s.step), want.rotate, s.counters.rotate);
    }
    let cum = report.cumulative();
    if cum.len() >= 3 {
        let xs: Vec<f64> = (1..=cum.len()).map(|k| k as f64).collect();
        let ys: Vec<f64> = cum.iter().map(|c| c.mult_cipher as f64).collect();
        let e = loglog_exponent(&xs, &ys)?;
        let want = Order::K.length_exponent();
        checks.push(Check {
            metric: "cumulative.mult_cipher.exponent".into(),
            predicted: want,
            measured: e,
            tolerance: 0.1,
            pass: (e - want).abs() <= 0.1,
        });
    }
    Ok(ValidationReport { checks })
}
