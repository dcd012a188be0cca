//! Metrics CSV and parameter checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{BatchNorm, Linear, NetworkParams};
use crate::numerics::Matrix;
use crate::trainer::{AblationRow, TrainHistory};

pub const METRICS_HEADER: &str = "epoch,L_R,L_S,L_H,L_T,n_pt,target_accuracy,mmd,coral,seconds";

pub const ABLATION_HEADER: &str = "variant,registration,histogram,pseudo,target_accuracy";

pub const CHECKPOINT_MAGIC: &str = "dfr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

/// Renders the metrics CSV: the header plus one row per epoch. Absent values
/// are empty cells; numbers carry 17 significant digits.
pub fn format_metrics(history: &TrainHistory) -> String {
    let mut s = String::with_capacity(64 + history.epochs.len() * 200);
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for r in &history.epochs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            cell(r.registration_loss),
            cell(Some(r.source_loss)),
            cell(r.histogram_loss),
            cell(r.target_loss),
            r.pseudo_labels,
            cell(r.target_accuracy),
            cell(Some(r.mmd)),
            cell(Some(r.coral)),
            cell(Some(r.seconds)),
        );
    }
    s
}

pub fn write_metrics(history: &TrainHistory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_metrics(history)).map_err(|e| Error::io(path, e))
}

/// Renders the ablation table, one row per variant in the given order.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    s.push_str(ABLATION_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.16e}",
            r.variant, r.registration, r.histogram, r.pseudo, r.accuracy
        );
    }
    s
}

pub fn write_ablation(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_ablation(rows)).map_err(|e| Error::io(path, e))
}

fn named_tensors(p: &NetworkParams) -> Vec<(String, &Matrix)> {
    let mut out = Vec::with_capacity(14);
    for (i, layer) in p.layers.iter().enumerate() {
        out.push((format!("fc{}.weight", i + 1), &layer.weight));
        out.push((format!("fc{}.bias", i + 1), &layer.bias));
        if let Some(norm) = p.norms.get(i) {
            out.push((format!("bn{}.gamma", i + 1), &norm.gamma));
            out.push((format!("bn{}.beta", i + 1), &norm.beta));
            out.push((format!("bn{}.running_mean", i + 1), &norm.running_mean));
            out.push((format!("bn{}.running_var", i + 1), &norm.running_var));
        }
    }
    out
}

/// Renders a checkpoint.
///
/// ```text
/// dfr-checkpoint 1
/// input_dim <d>
/// hidden <h1> <h2>
/// classes <C>
/// <name> <rows> <cols>
/// <row values, space separated>   (one line per row)
/// ...
/// ```
///
/// Tensors appear in the order `fc1.weight, fc1.bias, bn1.gamma, bn1.beta,
/// bn1.running_mean, bn1.running_var`, the same for layer 2, then
/// `fc3.weight, fc3.bias`. Values use the shortest decimal form that parses
/// back to the identical `f64`.
pub fn format_checkpoint(params: &NetworkParams) -> String {
    let [h1, h2] = params.hidden_widths();
    let mut s = String::new();
    let _ = writeln!(s, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
    let _ = writeln!(s, "input_dim {}", params.input_dim());
    let _ = writeln!(s, "hidden {h1} {h2}");
    let _ = writeln!(s, "classes {}", params.classes());
    for (name, m) in named_tensors(params) {
        let _ = writeln!(s, "{name} {} {}", m.rows(), m.cols());
        for row in m.iter_rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
    }
    s
}

pub fn write_checkpoint(params: &NetworkParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_checkpoint(params)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Reader<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        self.lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::data("checkpoint ends early"))
    }

    fn header(&mut self, key: &str, count: usize) -> Result<Vec<usize>> {
        let (n, line) = self.next()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(Error::data(format!("checkpoint line {n}: expected '{key}'")));
        }
        let values: Vec<usize> = parts
            .map(|p| p.parse().map_err(|_| Error::data(format!("checkpoint line {n}: bad number '{p}'"))))
            .collect::<Result<_>>()?;
        if values.len() != count {
            return Err(Error::data(format!("checkpoint line {n}: expected {count} values")));
        }
        Ok(values)
    }

    fn tensor(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let dims = self.header(name, 2)?;
        if dims != [rows, cols] {
            return Err(Error::data(format!(
                "checkpoint tensor {name} is {}x{}, expected {rows}x{cols}",
                dims[0], dims[1]
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (n, line) = self.next()?;
            let before = data.len();
            for cell in line.split_whitespace() {
                data.push(cell.parse::<f64>().map_err(|_| {
                    Error::data(format!("checkpoint line {n}: bad value '{cell}'"))
                })?);
            }
            if data.len() - before != cols {
                return Err(Error::data(format!("checkpoint line {n}: expected {cols} values")));
            }
        }
        Matrix::from_vec(rows, cols, data)
    }
}

pub fn parse_checkpoint(text: &str) -> Result<NetworkParams> {
    let mut r = Reader {
        lines: text.lines().enumerate(),
    };
    let (_, first) = r.next()?;
    let version = first
        .strip_prefix(CHECKPOINT_MAGIC)
        .map(str::trim)
        .ok_or_else(|| Error::data("not a checkpoint file"))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(Error::data(format!("unsupported checkpoint version '{version}'")));
    }
    let d = r.header("input_dim", 1)?[0];
    let hidden = r.header("hidden", 2)?;
    let c = r.header("classes", 1)?[0];
    let widths = [d, hidden[0], hidden[1], c];

    let mut layers = Vec::with_capacity(3);
    let mut norms = Vec::with_capacity(2);
    for i in 0..3 {
        let (fan_in, fan_out) = (widths[i], widths[i + 1]);
        let weight = r.tensor(&format!("fc{}.weight", i + 1), fan_in, fan_out)?;
        let bias = r.tensor(&format!("fc{}.bias", i + 1), 1, fan_out)?;
        layers.push(Linear { weight, bias });
        if i < 2 {
            let k = i + 1;
            let norm = BatchNorm {
                gamma: r.tensor(&format!("bn{k}.gamma"), 1, fan_out)?,
                beta: r.tensor(&format!("bn{k}.beta"), 1, fan_out)?,
                running_mean: r.tensor(&format!("bn{k}.running_mean"), 1, fan_out)?,
                running_var: r.tensor(&format!("bn{k}.running_var"), 1, fan_out)?,
            };
            if norm.running_var.as_slice().iter().any(|&v| v <= 0.0) {
                return Err(Error::data(format!("bn{k}.running_var must be positive")));
            }
            norms.push(norm);
        }
    }
    let layers: [Linear; 3] = layers.try_into().unwrap_or_else(|_| unreachable!());
    let norms: [BatchNorm; 2] = norms.try_into().unwrap_or_else(|_| unreachable!());
    Ok(NetworkParams { layers, norms })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<NetworkParams> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params_with_widths, Mode};
    use crate::trainer::EpochRecord;

    #[test]
    fn empty_history_is_header_only() {
        assert_eq!(format_metrics(&TrainHistory::default()), format!("{METRICS_HEADER}\n"));
    }

    #[test]
    fn metrics_rows_follow_epochs() {
        let record = |epoch| EpochRecord {
            epoch,
            registration_loss: None,
            source_loss: 0.5,
            histogram_loss: Some(0.25),
            target_loss: None,
            pseudo_labels: 3,
            target_accuracy: Some(0.75),
            mmd: 0.0,
            coral: 1.0,
            seconds: 0.0,
        };
        let h = TrainHistory {
            epochs: vec![record(0), record(1)],
            rounds: vec![],
        };
        let text = format_metrics(&h);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let cells: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(cells.len(), 10);
        assert_eq!(cells[1], "");
        assert_eq!(cells[2].parse::<f64>().unwrap(), 0.5);
        assert_eq!(cells[5], "3");
    }

    #[test]
    fn ablation_rows_keep_their_order() {
        let row = |variant, accuracy| AblationRow {
            variant,
            registration: true,
            histogram: false,
            pseudo: true,
            accuracy,
        };
        let text = format_ablation(&[row("DFR-H", 0.5), row("DFR", 0.75)]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], ABLATION_HEADER);
        assert!(lines[1].starts_with("DFR-H,true,false,true,"));
        assert!(lines[2].starts_with("DFR,"));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut p = init_params_with_widths(5, [7, 4], 3, 8).unwrap();
        let x = Matrix::from_fn(6, 5, |r, c| ((r * 5 + c) as f64).sin());
        p.forward(&x, Mode::Train).unwrap();
        p.layers[0].bias.set(0, 2, -0.0);
        p.layers[2].weight.set(1, 1, 1e-310);
        let back = parse_checkpoint(&format_checkpoint(&p)).unwrap();
        for (a, b) in p.trainable().iter().zip(back.trainable()) {
            let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back, p);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let p = init_params_with_widths(2, [3, 3], 2, 0).unwrap();
        let text = format_checkpoint(&p);
        assert!(parse_checkpoint(&text.replace("dfr-checkpoint 1", "dfr-checkpoint 9")).is_err());
        assert!(parse_checkpoint(&text.replace("classes 2", "classes 3")).is_err());
        let truncated: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(matches!(parse_checkpoint(&truncated), Err(Error::Data(_))));
    }

    #[test]
    fn io_errors_carry_the_path() {
        let err = write_metrics(&TrainHistory::default(), "/nonexistent-dir/m.csv").unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/m.csv"));
    }
}
