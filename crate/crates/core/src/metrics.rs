//! Per-round CSV metrics: one row per satellite plus one ground-station row.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::protocol::RoundReport;
use crate::Result;

/// Column names for a run with `classes` classes. Fixed for the whole run.
pub fn header(classes: usize) -> Vec<String> {
    let mut cols: Vec<String> = [
        "round",
        "sat_id",
        "loss_x",
        "loss_u",
        "loss_v",
        "server_loss",
        "test_acc",
        "bytes_up",
        "bytes_down",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    cols.extend((0..classes).map(|m| format!("pseudo_count_{m}")));
    cols.extend((0..classes).map(|m| format!("tau_{m}")));
    cols.push("sim_time_s".into());
    cols.push("records_sent".into());
    cols
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub struct MetricsWriter<W: Write> {
    out: csv::Writer<W>,
    classes: usize,
}

impl MetricsWriter<File> {
    pub fn create(path: impl AsRef<Path>, classes: usize) -> Result<Self> {
        Self::new(File::create(path)?, classes)
    }
}

impl<W: Write> MetricsWriter<W> {
    /// Wraps `sink` and writes the header row.
    pub fn new(sink: W, classes: usize) -> Result<Self> {
        let mut out = csv::Writer::from_writer(sink);
        out.write_record(header(classes))?;
        Ok(Self { out, classes })
    }

    pub fn write_round(&mut self, report: &RoundReport) -> Result<()> {
        let round = report.round.to_string();
        let time = report.sim_time_s.to_string();
        let mut pseudo_total = vec![0u64; self.classes];
        for s in &report.satellites {
            let mut row = vec![
                round.clone(),
                s.sat_id.to_string(),
                opt(s.losses.loss_x),
                opt(s.losses.loss_u),
                opt(s.losses.loss_v),
                String::new(),
                String::new(),
                s.contact.bytes_up.to_string(),
                s.contact.bytes_down.to_string(),
            ];
            for (m, total) in pseudo_total.iter_mut().enumerate() {
                let c = s.pseudo_counts.get(m).copied().unwrap_or(0);
                *total += c;
                row.push(c.to_string());
            }
            for m in 0..self.classes {
                row.push(
                    s.thresholds
                        .get(m)
                        .map(|t| t.to_string())
                        .unwrap_or_default(),
                );
            }
            row.push(time.clone());
            row.push(s.contact.records_sent.to_string());
            self.out.write_record(&row)?;
        }
        let mut row = vec![
            round,
            "gs".into(),
            String::new(),
            String::new(),
            String::new(),
            opt(report.server_loss),
            report.test_acc.to_string(),
            report.bytes_up().to_string(),
            report.bytes_down().to_string(),
        ];
        row.extend(pseudo_total.iter().map(u64::to_string));
        row.extend((0..self.classes).map(|_| String::new()));
        row.push(time);
        row.push(report.records_sent().to_string());
        self.out.write_record(&row)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.out
            .into_inner()
            .map_err(|e| crate::Error::Io(std::io::Error::other(e.to_string())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{ContactReport, LocalLosses, SatelliteReport};

    #[test]
    fn header_layout() {
        let h = header(2);
        assert_eq!(
            h.join(","),
            "round,sat_id,loss_x,loss_u,loss_v,server_loss,test_acc,bytes_up,bytes_down,\
             pseudo_count_0,pseudo_count_1,tau_0,tau_1,sim_time_s,records_sent"
        );
    }

    #[test]
    fn rows_per_round() {
        let report = RoundReport {
            round: 3,
            sim_time_s: 100.5,
            satellites: vec![SatelliteReport {
                sat_id: 0,
                losses: LocalLosses {
                    loss_x: Some(0.5),
                    loss_u: None,
                    loss_v: Some(1.25),
                    steps: 4,
                },
                contact: ContactReport {
                    bytes_down: 600,
                    bytes_up: 16,
                    records_sent: 1,
                    records_per_class: vec![1, 0],
                },
                contact_s: 10.0,
                pseudo_counts: vec![3, 4],
                thresholds: vec![0.25, 0.5],
                data_size: 20,
                model_delivered: false,
            }],
            server_loss: Some(2.0),
            test_acc: 0.75,
        };
        let mut w = MetricsWriter::new(Vec::new(), 2).unwrap();
        w.write_round(&report).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "3,0,0.5,,1.25,,,16,600,3,4,0.25,0.5,100.5,1");
        assert_eq!(lines[2], "3,gs,,,,2,0.75,16,600,3,4,,,100.5,1");
    }
}
