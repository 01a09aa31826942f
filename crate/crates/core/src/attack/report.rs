use std::fmt::{self, Write as _};

use crate::netspec::{LayerSpec, NetworkSpec, Shape};

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedLayer {
    pub spec: LayerSpec,
    /// Where each number came from.
    pub notes: Vec<String>,
    pub tiles: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedArchitecture {
    pub input: Shape,
    pub layers: Vec<ExtractedLayer>,
    pub notes: Vec<String>,
}

impl ExtractedArchitecture {
    pub fn to_spec(&self) -> NetworkSpec {
        NetworkSpec::new(self.input, self.layers.iter().map(|l| l.spec).collect())
    }

    /// Network-file text with the provenance of every layer as comments; it
    /// parses back with [`NetworkSpec`]'s reader.
    pub fn report(&self) -> String {
        let mut s = String::from("# extracted architecture\n");
        let _ = writeln!(s, "input = {}  # public dataset geometry", self.input);
        for l in &self.layers {
            let tiles = if l.tiles.is_empty() {
                String::new()
            } else {
                format!(
                    "  # tiles {}",
                    l.tiles
                        .iter()
                        .map(|t| t.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                )
            };
            let _ = writeln!(s, "{}{tiles}", l.spec);
            for n in &l.notes {
                let _ = writeln!(s, "#   {n}");
            }
        }
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        s
    }
}

impl fmt::Display for ExtractedArchitecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.report())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldMismatch {
    /// e.g. `conv2.kernel`
    pub field: String,
    pub extracted: String,
    pub expected: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparisonReport {
    pub fields_checked: usize,
    pub mismatches: Vec<FieldMismatch>,
}

impl ComparisonReport {
    pub fn is_match(&self) -> bool {
        self.mismatches.is_empty()
    }
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in &self.mismatches {
            writeln!(
                f,
                "mismatch {}: extracted {}, expected {}",
                m.field, m.extracted, m.expected
            )?;
        }
        let status = if self.is_match() { "MATCH" } else { "MISMATCH" };
        write!(
            f,
            "{status}: {} of {} fields agree",
            self.fields_checked - self.mismatches.len(),
            self.fields_checked
        )
    }
}

/// One Conv/FC layer plus the pooling that follows it.
#[derive(Debug, Clone, Copy)]
struct Stage {
    spec: LayerSpec,
    pool: usize,
}

fn stages(net: &NetworkSpec) -> Vec<Stage> {
    let mut out: Vec<Stage> = Vec::new();
    for l in &net.layers {
        match l {
            LayerSpec::Pool { size } => {
                if let Some(s) = out.last_mut() {
                    s.pool *= size;
                }
            }
            spec => out.push(Stage {
                spec: *spec,
                pool: 1,
            }),
        }
    }
    out
}

fn fields(s: &Stage) -> Vec<(&'static str, String)> {
    match s.spec {
        LayerSpec::Conv {
            out_channels,
            kernel,
            ..
        } => vec![
            ("kind", "conv".into()),
            ("out", out_channels.to_string()),
            ("kernel", kernel.to_string()),
            ("pool", s.pool.to_string()),
        ],
        LayerSpec::Fc { out_features } => {
            vec![
                ("kind", "fc".into()),
                ("out", out_features.to_string()),
                ("pool", s.pool.to_string()),
            ]
        }
        LayerSpec::Pool { .. } => unreachable!("pools are folded into stages"),
    }
}

/// Field-by-field comparison over kind, output size, kernel size and the
/// pooling after each layer. Layers are named after the ground truth
/// (`conv1`, `fc2`, ...); a missing layer counts every one of its fields.
pub fn compare(extracted: &NetworkSpec, truth: &NetworkSpec) -> ComparisonReport {
    let (ex, tr) = (stages(extracted), stages(truth));
    let mut mismatches = Vec::new();
    let mut checked = 0;
    let mut counters = (0, 0);
    let missing = || "missing".to_string();
    for i in 0..ex.len().max(tr.len()) {
        let named = tr.get(i).or(ex.get(i)).expect("index below max length");
        let idx = match named.spec {
            LayerSpec::Conv { .. } => {
                counters.0 += 1;
                counters.0
            }
            _ => {
                counters.1 += 1;
                counters.1
            }
        };
        let name = format!("{}{idx}", named.spec.kind_name());
        let ef = ex.get(i).map(fields).unwrap_or_default();
        let tf = tr.get(i).map(fields).unwrap_or_default();
        let keys: Vec<&str> = if tf.is_empty() {
            ef.iter().map(|f| f.0).collect()
        } else {
            tf.iter().map(|f| f.0).collect()
        };
        for key in keys {
            checked += 1;
            let e = ef
                .iter()
                .find(|f| f.0 == key)
                .map(|f| f.1.clone())
                .unwrap_or_else(missing);
            let t = tf
                .iter()
                .find(|f| f.0 == key)
                .map(|f| f.1.clone())
                .unwrap_or_else(missing);
            if e != t {
                mismatches.push(FieldMismatch {
                    field: format!("{name}.{key}"),
                    extracted: e,
                    expected: t,
                });
            }
        }
    }
    if extracted.input != truth.input {
        checked += 1;
        mismatches.push(FieldMismatch {
            field: "input".into(),
            extracted: extracted.input.to_string(),
            expected: truth.input.to_string(),
        });
    } else {
        checked += 1;
    }
    ComparisonReport {
        fields_checked: checked,
        mismatches,
    }
}
