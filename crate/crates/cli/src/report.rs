//! Plain-text reports for metrics and parameter counts.

use std::fmt::Write;

use manet::data::ClassTaxonomy;
use manet::model::ParamReport;
use manet::train::Metrics;
use manet::Component;

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

/// Per-class accuracy / F1 / IoU rows over the foreground classes, then the
/// overall accuracy, mean F1 and mean IoU.
pub fn metrics_table(m: &Metrics, taxonomy: &ClassTaxonomy, header: &str) -> String {
    let fg = taxonomy.foreground_indices();
    let mut out = String::new();
    writeln!(out, "# {header}").unwrap();
    let mut head = format!("{:<6}", "");
    for &c in &fg {
        write!(head, "{:>8}", taxonomy.classes[c].short()).unwrap();
    }
    write!(head, "{:>8}{:>8}{:>8}", "Total", "mF1", "mIoU").unwrap();
    writeln!(out, "{}", head.trim_end()).unwrap();
    type Score = fn(&manet::train::ClassScores) -> Option<f64>;
    let rows: [(&str, Score); 3] = [("OA", |s| s.accuracy), ("F1", |s| s.f1), ("IoU", |s| s.iou)];
    for (i, (label, get)) in rows.iter().enumerate() {
        let mut line = format!("{label:<6}");
        for &c in &fg {
            write!(line, "{:>8}", cell(get(&m.per_class[c]))).unwrap();
        }
        if i == 0 {
            write!(line, "{:>8.2}{:>8.2}{:>8.2}", m.oa, m.mf1, m.miou).unwrap();
        }
        writeln!(out, "{}", line.trim_end()).unwrap();
    }
    out
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn params_table(title: &str, report: &ParamReport, excluded: &[(&str, usize)]) -> String {
    let mut out = String::new();
    writeln!(out, "# {title}").unwrap();
    writeln!(out, "{:<18}{:>16}{:>16}", "component", "frozen", "trainable").unwrap();
    for c in Component::ALL {
        let (f, t) = report.get(c);
        writeln!(out, "{:<18}{:>16}{:>16}", c.to_string(), thousands(f), thousands(t)).unwrap();
    }
    writeln!(out, "{:<18}{:>16}{:>16}", "total", thousands(report.frozen()), thousands(report.trainable())).unwrap();
    writeln!(out, "not built (reference encoder components):").unwrap();
    for (name, n) in excluded {
        writeln!(out, "  {:<32}{:>16}", name, thousands(*n)).unwrap();
    }
    let backbone = report.get(Component::Backbone);
    let with_excluded = backbone.0 + backbone.1 + excluded.iter().map(|e| e.1).sum::<usize>();
    writeln!(out, "backbone incl. not-built components: {}", thousands(with_excluded)).unwrap();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands_separators() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(1234), "1,234");
        assert_eq!(thousands(88790784), "88,790,784");
    }
}
