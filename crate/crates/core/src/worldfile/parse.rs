//! Schema for expanded world XML.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use roxmltree::{Document, Node};

use crate::geometry::{Pose2, Vec2, Vec3};
use crate::physics2d::{collision_polygon_from_mesh, ConvexPolygon};
use crate::sensors::LidarConfig;
use crate::terrain::ElevationGrid;
use crate::vehicle::{weight_on_wheels, FrictionParams, Kinematics, PidParams, RollingParams, Twist, VehicleModel, Wheel};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaError {
    /// Slash-separated element path, e.g. `world/vehicle[r1]/wheel[left]`.
    pub path: String,
    pub line: u32,
    pub message: String,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: <{}>: {}", self.line, self.path, self.message)
    }
}

impl std::error::Error for SchemaError {}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub name: String,
    pub shape: ConvexPolygon,
    pub pose: Pose2,
    pub is_static: bool,
    pub mass: f64,
    pub izz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleSpec {
    pub name: String,
    pub pose: Pose2,
    pub kinematics: Kinematics,
    pub chassis_mass: f64,
    /// Yaw inertia of the whole vehicle about its COM.
    pub izz: f64,
    pub com: Vec2,
    pub shape: ConvexPolygon,
    pub wheels: Vec<Wheel>,
    pub pid: PidParams,
    pub friction: FrictionParams,
    pub lidars: Vec<LidarConfig>,
    /// CSV log path as written in the file.
    pub log: Option<PathBuf>,
    pub twist: Twist,
    /// Initial (vx, vy) in the vehicle frame and yaw rate.
    pub initial_velocity: (Vec2, f64),
}

impl VehicleSpec {
    pub fn total_mass(&self) -> f64 {
        self.chassis_mass + self.wheels.iter().map(|w| w.mass).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldDefinition {
    pub dt: f64,
    /// 0 runs unthrottled.
    pub realtime_factor: f64,
    pub gravity: f64,
    pub seed: u64,
    /// Rate of the clock, pose and odometry topics (Hz).
    pub publish_rate: f64,
    pub blocks: Vec<BlockSpec>,
    pub vehicles: Vec<VehicleSpec>,
    pub elevation: Option<ElevationGrid>,
}

struct Ctx<'a, 'input> {
    node: Node<'a, 'input>,
    path: String,
    doc: &'a Document<'input>,
}

impl<'a, 'input> Ctx<'a, 'input> {
    fn err(&self, message: impl Into<String>) -> SchemaError {
        let line = self.doc.text_pos_at(self.node.range().start).row;
        SchemaError { path: self.path.clone(), line, message: message.into() }
    }

    fn child(&self, node: Node<'a, 'input>) -> Ctx<'a, 'input> {
        let tag = node.tag_name().name();
        let path = match node.attribute("name") {
            Some(n) => format!("{}/{tag}[{n}]", self.path),
            None => format!("{}/{tag}", self.path),
        };
        Ctx { node, path, doc: self.doc }
    }

    fn elements(&self) -> impl Iterator<Item = Ctx<'a, 'input>> + '_ {
        self.node.children().filter(Node::is_element).map(|n| self.child(n))
    }

    fn tag(&self) -> &str {
        self.node.tag_name().name()
    }

    fn allow(&self, attrs: &[&str]) -> Result<(), SchemaError> {
        for a in self.node.attributes() {
            if !attrs.contains(&a.name()) {
                return Err(self.err(format!("unknown attribute {:?}", a.name())));
            }
        }
        Ok(())
    }

    fn text_attr(&self, name: &str) -> Option<&'a str> {
        self.node.attribute(name)
    }

    fn req_text(&self, name: &str) -> Result<&'a str, SchemaError> {
        self.text_attr(name).ok_or_else(|| self.err(format!("missing attribute {name:?}")))
    }

    fn num(&self, name: &str) -> Result<Option<f64>, SchemaError> {
        match self.node.attribute(name) {
            None => Ok(None),
            Some(s) => {
                let v: f64 = s.trim().parse().map_err(|_| self.err(format!("{name}={s:?} is not a number")))?;
                if !v.is_finite() {
                    return Err(self.err(format!("{name} must be finite")));
                }
                Ok(Some(v))
            }
        }
    }

    fn req(&self, name: &str) -> Result<f64, SchemaError> {
        self.num(name)?.ok_or_else(|| self.err(format!("missing attribute {name:?}")))
    }

    fn or(&self, name: &str, default: f64) -> Result<f64, SchemaError> {
        Ok(self.num(name)?.unwrap_or(default))
    }

    fn positive(&self, name: &str, v: f64) -> Result<f64, SchemaError> {
        if v > 0.0 {
            Ok(v)
        } else {
            Err(self.err(format!("{name} must be > 0, got {v}")))
        }
    }

    fn non_negative(&self, name: &str, v: f64) -> Result<f64, SchemaError> {
        if v >= 0.0 {
            Ok(v)
        } else {
            Err(self.err(format!("{name} must be >= 0, got {v}")))
        }
    }

    fn flag(&self, name: &str) -> Result<Option<bool>, SchemaError> {
        match self.node.attribute(name) {
            None => Ok(None),
            Some("true" | "1") => Ok(Some(true)),
            Some("false" | "0") => Ok(Some(false)),
            Some(s) => Err(self.err(format!("{name}={s:?} is not a boolean"))),
        }
    }

    fn integer(&self, name: &str) -> Result<Option<u64>, SchemaError> {
        match self.node.attribute(name) {
            None => Ok(None),
            Some(s) => s.trim().parse().map(Some).map_err(|_| self.err(format!("{name}={s:?} is not a non-negative integer"))),
        }
    }
}

/// Parses an expanded world; relative file references resolve from the
/// current directory.
pub fn parse_world(expanded_xml: &str) -> Result<WorldDefinition, SchemaError> {
    parse_world_in(expanded_xml, Path::new("."))
}

/// As [`parse_world`], resolving relative file references against `base_dir`.
pub fn parse_world_in(expanded_xml: &str, base_dir: &Path) -> Result<WorldDefinition, SchemaError> {
    let doc = Document::parse(expanded_xml).map_err(|e| SchemaError {
        path: String::new(),
        line: e.pos().row,
        message: format!("malformed XML: {e}"),
    })?;
    let root = Ctx { node: doc.root_element(), path: doc.root_element().tag_name().name().to_string(), doc: &doc };
    if root.tag() != "world" {
        return Err(root.err("root element must be <world>"));
    }
    root.allow(&[])?;

    let mut def = WorldDefinition {
        dt: 0.0,
        realtime_factor: 1.0,
        gravity: 9.81,
        seed: 0,
        publish_rate: 20.0,
        blocks: Vec::new(),
        vehicles: Vec::new(),
        elevation: None,
    };
    let mut saw_sim = false;
    let mut names = HashSet::new();
    for el in root.elements() {
        match el.tag() {
            "simulation" => {
                if saw_sim {
                    return Err(el.err("duplicate <simulation>"));
                }
                saw_sim = true;
                el.allow(&["dt", "realtime_factor", "gravity", "seed", "publish_rate"])?;
                def.dt = el.positive("dt", el.req("dt")?)?;
                def.realtime_factor = el.non_negative("realtime_factor", el.or("realtime_factor", 1.0)?)?;
                def.gravity = el.positive("gravity", el.or("gravity", 9.81)?)?;
                def.seed = el.integer("seed")?.unwrap_or(0);
                def.publish_rate = el.positive("publish_rate", el.or("publish_rate", 20.0)?)?;
            }
            "elevation" => {
                if def.elevation.is_some() {
                    return Err(el.err("duplicate <elevation>"));
                }
                def.elevation = Some(elevation(&el, base_dir)?);
            }
            "block" => {
                let b = block(&el)?;
                if !names.insert(b.name.clone()) {
                    return Err(el.err(format!("duplicate name {:?}", b.name)));
                }
                def.blocks.push(b);
            }
            "vehicle" => {
                let v = vehicle(&el)?;
                if !names.insert(v.name.clone()) {
                    return Err(el.err(format!("duplicate name {:?}", v.name)));
                }
                def.vehicles.push(v);
            }
            other => return Err(el.err(format!("unknown element <{other}>"))),
        }
    }
    if !saw_sim {
        return Err(root.err("missing <simulation dt=...>"));
    }
    Ok(def)
}

fn elevation(el: &Ctx, base_dir: &Path) -> Result<ElevationGrid, SchemaError> {
    el.allow(&["file", "origin_x", "origin_y", "resolution"])?;
    let origin = Vec2::new(el.or("origin_x", 0.0)?, el.or("origin_y", 0.0)?);
    let res = el.positive("resolution", el.req("resolution")?)?;
    if let Some(c) = el.elements().next() {
        return Err(c.err(format!("unknown element <{}>", c.tag())));
    }
    let result = match el.text_attr("file") {
        Some(f) => ElevationGrid::load(&base_dir.join(f), origin, res),
        None => {
            let text = el.node.text().unwrap_or("");
            ElevationGrid::parse_matrix(text).and_then(|m| ElevationGrid::new(origin, res, m))
        }
    };
    result.map_err(|e| el.err(e.to_string()))
}

/// The single shape child of a block or chassis.
fn shape(parent: &Ctx) -> Result<ConvexPolygon, SchemaError> {
    let mut found = None;
    for el in parent.elements() {
        let poly = match el.tag() {
            "box" => {
                el.allow(&["length", "width"])?;
                ConvexPolygon::rectangle(el.positive("length", el.req("length")?)?, el.positive("width", el.req("width")?)?)
            }
            "polygon" => {
                el.allow(&[])?;
                let mut pts = Vec::new();
                for p in el.elements() {
                    if p.tag() != "pt" {
                        return Err(p.err(format!("unknown element <{}> in <polygon>", p.tag())));
                    }
                    p.allow(&["x", "y"])?;
                    pts.push(Vec2::new(p.req("x")?, p.req("y")?));
                }
                ConvexPolygon::new(pts).map_err(|e| el.err(e.to_string()))?
            }
            "mesh" => {
                el.allow(&["z_min", "z_max"])?;
                let (lo, hi) = (el.or("z_min", f64::NEG_INFINITY)?, el.or("z_max", f64::INFINITY)?);
                let mut verts = Vec::new();
                for v in el.elements() {
                    if v.tag() != "v" {
                        return Err(v.err(format!("unknown element <{}> in <mesh>", v.tag())));
                    }
                    v.allow(&["x", "y", "z"])?;
                    verts.push(Vec3::new(v.req("x")?, v.req("y")?, v.or("z", 0.0)?));
                }
                collision_polygon_from_mesh(&verts, lo, hi).map_err(|e| el.err(e.to_string()))?
            }
            _ => continue,
        };
        if found.is_some() {
            return Err(el.err("only one shape allowed"));
        }
        found = Some(poly);
    }
    found.ok_or_else(|| parent.err("needs a <box>, <polygon> or <mesh> shape"))
}

fn named(el: &Ctx) -> Result<String, SchemaError> {
    let n = el.req_text("name")?;
    if n.is_empty() || n.contains('/') || n.chars().any(char::is_whitespace) {
        return Err(el.err(format!("name {n:?} must be non-empty without '/' or spaces")));
    }
    Ok(n.to_string())
}

fn block(el: &Ctx) -> Result<BlockSpec, SchemaError> {
    el.allow(&["name", "x", "y", "yaw", "mass", "izz", "static"])?;
    let name = named(el)?;
    for c in el.elements() {
        if !matches!(c.tag(), "box" | "polygon" | "mesh") {
            return Err(c.err(format!("unknown element <{}>", c.tag())));
        }
    }
    let shape = shape(el)?;
    let pose = Pose2::new(el.or("x", 0.0)?, el.or("y", 0.0)?, el.or("yaw", 0.0)?);
    let mass = el.num("mass")?;
    let is_static = el.flag("static")?.unwrap_or(mass.is_none());
    if is_static {
        return Ok(BlockSpec { name, shape, pose, is_static, mass: 0.0, izz: 0.0 });
    }
    let mass = el.positive("mass", mass.ok_or_else(|| el.err("dynamic block needs a mass"))?)?;
    let izz = match el.num("izz")? {
        Some(v) => el.positive("izz", v)?,
        None => shape.inertia(mass, shape.centroid()),
    };
    Ok(BlockSpec { name, shape, pose, is_static, mass, izz })
}

fn vehicle(el: &Ctx) -> Result<VehicleSpec, SchemaError> {
    el.allow(&["name", "kinematics", "x", "y", "yaw"])?;
    let name = named(el)?;
    let pose = Pose2::new(el.or("x", 0.0)?, el.or("y", 0.0)?, el.or("yaw", 0.0)?);
    let kind = el.text_attr("kinematics").unwrap_or("differential");
    if kind != "differential" && kind != "ackermann" {
        return Err(el.err(format!("kinematics must be differential or ackermann, got {kind:?}")));
    }

    let mut chassis = None;
    let mut wheels: Vec<Wheel> = Vec::new();
    let mut ackermann = None;
    let mut pid = PidParams::default();
    let mut friction = FrictionParams::default();
    let mut lidars: Vec<LidarConfig> = Vec::new();
    let mut log = None;
    let mut twist = Twist::default();
    let mut initial_velocity = (Vec2::ZERO, 0.0);

    for c in el.elements() {
        match c.tag() {
            "chassis" => {
                if chassis.is_some() {
                    return Err(c.err("duplicate <chassis>"));
                }
                c.allow(&["mass", "izz", "com_x", "com_y"])?;
                for s in c.elements() {
                    if !matches!(s.tag(), "box" | "polygon" | "mesh") {
                        return Err(s.err(format!("unknown element <{}>", s.tag())));
                    }
                }
                let mass = c.positive("mass", c.req("mass")?)?;
                let izz = c.num("izz")?.map(|v| c.positive("izz", v)).transpose()?;
                chassis = Some((mass, izz, Vec2::new(c.or("com_x", 0.0)?, c.or("com_y", 0.0)?), shape(&c)?, c.path.clone()));
            }
            "wheel" => {
                c.allow(&["name", "x", "y", "radius", "width", "mass", "iy", "steerable"])?;
                let wname = named(&c)?;
                if wheels.iter().any(|w| w.name == wname) {
                    return Err(c.err(format!("duplicate wheel name {wname:?}")));
                }
                let radius = c.positive("radius", c.req("radius")?)?;
                let width = c.positive("width", c.or("width", 0.1)?)?;
                let mass = c.positive("mass", c.or("mass", 1.0)?)?;
                let iy = c.num("iy")?.map(|v| c.positive("iy", v)).transpose()?;
                let mut w = Wheel::new(&wname, Pose2::new(c.req("x")?, c.req("y")?, 0.0), radius, width, mass, iy);
                w.steerable = c.flag("steerable")?.unwrap_or(false);
                wheels.push(w);
            }
            "ackermann" => {
                c.allow(&["wheelbase", "max_steer"])?;
                ackermann = Some((c.positive("wheelbase", c.req("wheelbase")?)?, c.positive("max_steer", c.req("max_steer")?)?));
            }
            "controller" => {
                c.allow(&["kp", "ki", "kd", "i_clamp", "tau_max"])?;
                let d = PidParams::default();
                pid = PidParams {
                    kp: c.non_negative("kp", c.or("kp", d.kp)?)?,
                    ki: c.non_negative("ki", c.or("ki", d.ki)?)?,
                    kd: c.non_negative("kd", c.or("kd", d.kd)?)?,
                    i_clamp: c.non_negative("i_clamp", c.or("i_clamp", d.i_clamp)?)?,
                    tau_max: c.positive("tau_max", c.or("tau_max", d.tau_max)?)?,
                };
            }
            "friction" => {
                c.allow(&["mu", "damping"])?;
                let mut rolling = None;
                for r in c.elements() {
                    if r.tag() != "rolling" {
                        return Err(r.err(format!("unknown element <{}>", r.tag())));
                    }
                    r.allow(&["r1", "r2", "v_alpha"])?;
                    let d = RollingParams::default();
                    rolling = Some(RollingParams {
                        r1: r.non_negative("r1", r.or("r1", d.r1)?)?,
                        r2: r.non_negative("r2", r.or("r2", d.r2)?)?,
                        v_alpha: r.positive("v_alpha", r.or("v_alpha", d.v_alpha)?)?,
                    });
                }
                friction = FrictionParams {
                    mu: c.non_negative("mu", c.or("mu", FrictionParams::default().mu)?)?,
                    c_damping: c.non_negative("damping", c.or("damping", 0.0)?)?,
                    rolling,
                };
            }
            "lidar" => {
                c.allow(&["name", "x", "y", "yaw", "fov", "rays", "range", "rate", "noise", "topic"])?;
                let lname = named(&c)?;
                if lidars.iter().any(|l| l.name == lname) {
                    return Err(c.err(format!("duplicate sensor name {lname:?}")));
                }
                let fov = c.or("fov", 2.0 * std::f64::consts::PI)?;
                if !(fov > 0.0 && fov <= 2.0 * std::f64::consts::PI + 1e-9) {
                    return Err(c.err(format!("fov must be in (0, 2*pi], got {fov}")));
                }
                let n_rays = c.integer("rays")?.unwrap_or(180) as usize;
                if n_rays < 2 {
                    return Err(c.err("rays must be >= 2"));
                }
                lidars.push(LidarConfig {
                    mount: Pose2::new(c.or("x", 0.0)?, c.or("y", 0.0)?, c.or("yaw", 0.0)?),
                    fov,
                    n_rays,
                    max_range: c.positive("range", c.or("range", 10.0)?)?,
                    rate: c.positive("rate", c.or("rate", 10.0)?)?,
                    noise_sigma: c.non_negative("noise", c.or("noise", 0.0)?)?,
                    topic: c.text_attr("topic").map_or_else(|| format!("{name}/{lname}"), str::to_string),
                    name: lname,
                });
            }
            "log" => {
                c.allow(&["file"])?;
                log = Some(PathBuf::from(c.req_text("file")?));
            }
            "twist" => {
                c.allow(&["v", "omega"])?;
                twist = Twist { v: c.or("v", 0.0)?, omega: c.or("omega", 0.0)? };
            }
            "velocity" => {
                c.allow(&["vx", "vy", "omega"])?;
                initial_velocity = (Vec2::new(c.or("vx", 0.0)?, c.or("vy", 0.0)?), c.or("omega", 0.0)?);
            }
            other => return Err(c.err(format!("unknown element <{other}>"))),
        }
    }

    let (chassis_mass, izz, com, shape, _) = chassis.ok_or_else(|| el.err("missing <chassis>"))?;
    let kinematics = match (kind, ackermann) {
        ("ackermann", Some((wheelbase, max_steer))) => Kinematics::Ackermann { wheelbase, max_steer },
        ("ackermann", None) => return Err(el.err("ackermann vehicle needs an <ackermann wheelbase= max_steer=/>")),
        (_, Some(_)) => return Err(el.err("<ackermann> on a differential vehicle")),
        _ => Kinematics::Differential,
    };
    VehicleModel::new(&name, 0, chassis_mass, wheels.clone(), kinematics, pid, friction)
        .and_then(|_| weight_on_wheels(&wheels, chassis_mass, com, 1.0))
        .map_err(|e| el.err(e.to_string()))?;
    let total = chassis_mass + wheels.iter().map(|w| w.mass).sum::<f64>();
    let izz = izz.unwrap_or_else(|| shape.inertia(total, com));
    Ok(VehicleSpec {
        name,
        pose,
        kinematics,
        chassis_mass,
        izz,
        com,
        shape,
        wheels,
        pid,
        friction,
        lidars,
        log,
        twist,
        initial_velocity,
    })
}
