//! Per-tick CSV physics log.
//!
//! Columns: `t, x, y, yaw, z, pitch, roll, cmd_v, cmd_omega`, then eight
//! per wheel: spin rate, spin angle, motor torque, longitudinal and lateral
//! friction, normal load and the two slip flags (0/1).

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{VehicleError, VehicleModel};
use crate::physics2d::RigidBody2D;

pub const BASE_COLUMNS: usize = 9;
pub const WHEEL_COLUMNS: usize = 8;

/// Formats like C's `%.9g`.
pub fn fmt_g9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let m = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

pub fn csv_header(vehicle: &VehicleModel) -> String {
    let mut h = String::from("t,x,y,yaw,z,pitch,roll,cmd_v,cmd_omega");
    for i in 0..vehicle.wheels.len() {
        for col in ["omega", "phi", "tau_m", "fx", "fy", "load", "slip_lat", "slip_long"] {
            let _ = write!(h, ",w{i}_{col}");
        }
    }
    h
}

pub fn csv_log_row(vehicle: &VehicleModel, chassis: &RigidBody2D, t: f64) -> String {
    let p = &chassis.pose;
    let a = &vehicle.attitude;
    let mut fields = vec![t, p.x, p.y, p.yaw, a.z, a.pitch, a.roll, vehicle.cmd.v, vehicle.cmd.omega];
    for w in &vehicle.wheels {
        let o = &w.outcome;
        fields.extend([
            w.omega,
            w.phi,
            w.tau_m,
            o.fx,
            o.fy,
            w.load,
            o.slipped_lat as u8 as f64,
            o.slipped_long as u8 as f64,
        ]);
    }
    let mut row = String::with_capacity(fields.len() * 12);
    for (i, f) in fields.iter().enumerate() {
        if i > 0 {
            row.push(',');
        }
        row.push_str(&fmt_g9(*f));
    }
    row
}

/// Buffered CSV sink; the header goes out with the first row.
pub struct CsvLogger {
    sink: Box<dyn Write + Send>,
    header_written: bool,
}

impl std::fmt::Debug for CsvLogger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CsvLogger").field("header_written", &self.header_written).finish()
    }
}

impl CsvLogger {
    pub fn new(sink: Box<dyn Write + Send>) -> Self {
        Self { sink, header_written: false }
    }

    pub fn create(path: &Path) -> Result<Self, VehicleError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Self::new(Box::new(BufWriter::new(File::create(path)?))))
    }

    pub fn log(&mut self, vehicle: &VehicleModel, chassis: &RigidBody2D, t: f64) -> Result<(), VehicleError> {
        if !self.header_written {
            writeln!(self.sink, "{}", csv_header(vehicle))?;
            self.header_written = true;
        }
        writeln!(self.sink, "{}", csv_log_row(vehicle, chassis, t))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), VehicleError> {
        self.sink.flush()?;
        Ok(())
    }
}
