//! Procedural scenes: typed coloured shapes on a plain background, exact
//! per-object masks, symbolic edits and template sentences.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    Cyan,
    White,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
        Color::Cyan,
        Color::White,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::Cyan => "cyan",
            Color::White => "white",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [50, 80, 230],
            Color::Yellow => [235, 220, 50],
            Color::Purple => [150, 60, 190],
            Color::Orange => [245, 140, 30],
            Color::Cyan => [40, 210, 220],
            Color::White => [245, 245, 245],
        }
    }
}

/// Background categories; every pixel not covered by an object is BACKGROUND.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Gray,
    Black,
    Brown,
    Navy,
}

impl Background {
    pub const ALL: [Background; 4] = [
        Background::Gray,
        Background::Black,
        Background::Brown,
        Background::Navy,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Background::Gray => [100, 100, 100],
            Background::Black => [20, 20, 20],
            Background::Brown => [90, 60, 40],
            Background::Navy => [20, 30, 70],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub shape: Shape,
    pub color: Color,
    /// Pixel coordinates `(x, y)`.
    pub center: (i32, i32),
    /// Extent in pixels (diameter / side length).
    pub size: u32,
    /// Draw order; higher draws on top.
    pub z: u32,
}

impl SceneObject {
    /// Whether the pixel at `(px, py)` falls inside this object's silhouette.
    pub fn covers(&self, px: i32, py: i32) -> bool {
        shape_covers(self.shape, self.size, px - self.center.0, py - self.center.1)
    }

    pub fn label(&self) -> String {
        format!("{} {}", self.color.name(), self.shape.name())
    }

    pub fn bbox(&self) -> (i32, i32, i32, i32) {
        let r = (self.size as i32 + 1) / 2;
        (
            self.center.0 - r,
            self.center.1 - r,
            self.center.0 + r,
            self.center.1 + r,
        )
    }
}

fn shape_covers(shape: Shape, size: u32, dx: i32, dy: i32) -> bool {
    let r = size as f64 / 2.0;
    let (x, y) = (dx as f64, dy as f64);
    match shape {
        Shape::Circle => x * x + y * y <= r * r,
        Shape::Square => {
            let h = r - 0.5;
            x.abs() <= h && y.abs() <= h
        }
        Shape::Triangle => {
            let h = r - 0.5;
            if y < -h || y > h {
                return false;
            }
            let t = (y + h) / (2.0 * h);
            x.abs() <= t * h + 0.5
        }
        Shape::Star => point_in_star(x, y, r),
    }
}

fn point_in_star(x: f64, y: f64, r: f64) -> bool {
    let inner = r * 0.5;
    let mut pts = [(0.0, 0.0); 10];
    for (i, p) in pts.iter_mut().enumerate() {
        let rad = if i % 2 == 0 { r } else { inner };
        let ang = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
        *p = (rad * ang.cos(), rad * ang.sin());
    }
    // even-odd rule
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub background: Background,
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn empty(width: u32, height: u32, background: Background) -> Self {
        Self {
            width,
            height,
            background,
            objects: Vec::new(),
        }
    }

    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    fn object_mut(&mut self, id: u32) -> Option<&mut SceneObject> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    /// Objects in draw order (z, then id).
    pub fn draw_order(&self) -> Vec<&SceneObject> {
        let mut v: Vec<&SceneObject> = self.objects.iter().collect();
        v.sort_by_key(|o| (o.z, o.id));
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Scene("empty canvas".into()));
        }
        let mut ids: Vec<u32> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Scene("duplicate object id".into()));
        }
        for o in &self.objects {
            if o.size == 0 {
                return Err(Error::Scene(format!("object {} has zero size", o.id)));
            }
            let (x, y) = o.center;
            if x < 0 || y < 0 || x >= self.width as i32 || y >= self.height as i32 {
                return Err(Error::Scene(format!("object {} centre off canvas", o.id)));
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectMask {
    pub object_id: u32,
    pub width: u32,
    pub height: u32,
    /// Row-major `height × width`.
    pub grid: Vec<bool>,
}

impl ObjectMask {
    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.grid[(y * self.width + x) as usize]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    /// Row-major `height × width × 3`.
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity((width * height * 3) as usize);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (P6).
    pub fn write_ppm(&self, mut w: impl Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn read_ppm(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut fields = Vec::new();
        while fields.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Image("truncated PPM header".into()));
            }
            let line = line.split('#').next().unwrap_or("");
            fields.extend(line.split_whitespace().map(str::to_owned));
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(Error::Image(format!("unsupported PPM header {fields:?}")));
        }
        let parse = |s: &str| {
            s.parse::<u32>()
                .map_err(|_| Error::Image(format!("bad dimension {s:?}")))
        };
        let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
        let mut pixels = vec![0u8; (width * height * 3) as usize];
        r.read_exact(&mut pixels)
            .map_err(|_| Error::Image("truncated PPM data".into()))?;
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.pixels.len() + 20);
        self.write_ppm(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        Self::read_ppm(std::fs::File::open(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    /// Inclusive object-count range.
    pub n_objects: (usize, usize),
    /// Inclusive object-size range in pixels.
    pub size_range: (u32, u32),
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            n_objects: (2, 4),
            size_range: (6, 16),
        }
    }
}

const PLACEMENT_TRIES: usize = 400;
const GAP: i32 = 2;

fn boxes_clear(a: (i32, i32, i32, i32), b: (i32, i32, i32, i32)) -> bool {
    a.2 + GAP < b.0 || b.2 + GAP < a.0 || a.3 + GAP < b.1 || b.3 + GAP < a.1
}

fn random_center<R: Rng>(rng: &mut R, size: u32, w: u32, h: u32) -> Option<(i32, i32)> {
    let r = (size as i32 + 1) / 2;
    let (lo_x, hi_x) = (r, w as i32 - 1 - r);
    let (lo_y, hi_y) = (r, h as i32 - 1 - r);
    if lo_x > hi_x || lo_y > hi_y {
        return None;
    }
    Some((rng.random_range(lo_x..=hi_x), rng.random_range(lo_y..=hi_y)))
}

/// Samples a scene whose objects are fully visible, with distinct
/// colour–shape pairs.
pub fn gen_scene(seed: u64, config: &SceneConfig) -> Result<SceneSpec> {
    let (lo, hi) = config.n_objects;
    if lo == 0 || lo > hi {
        return Err(Error::Scene(format!("bad object count range {lo}..={hi}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(lo..=hi);
    let background = *Background::ALL.choose(&mut rng).expect("non-empty");
    let mut scene = SceneSpec::empty(config.width, config.height, background);
    for id in 0..n as u32 {
        let (shape, color) = loop {
            let s = *Shape::ALL.choose(&mut rng).expect("non-empty");
            let c = *Color::ALL.choose(&mut rng).expect("non-empty");
            if !scene.objects.iter().any(|o| o.shape == s && o.color == c) {
                break (s, c);
            }
        };
        let size = rng.random_range(config.size_range.0..=config.size_range.1);
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let Some(center) = random_center(&mut rng, size, config.width, config.height) else {
                break;
            };
            let cand = SceneObject {
                id,
                shape,
                color,
                center,
                size,
                z: id,
            };
            if scene
                .objects
                .iter()
                .all(|o| boxes_clear(o.bbox(), cand.bbox()))
            {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(o) => scene.objects.push(o),
            None => {
                return Err(Error::CanvasTooSmall {
                    requested: n,
                    width: config.width,
                    height: config.height,
                })
            }
        }
    }
    Ok(scene)
}

/// Pixel owner map: `Some(id)` of the topmost object per pixel.
pub fn owner_map(scene: &SceneSpec) -> Vec<Option<u32>> {
    let (w, h) = (scene.width as i32, scene.height as i32);
    let mut owner = vec![None; (w * h) as usize];
    for o in scene.draw_order() {
        let (x0, y0, x1, y1) = o.bbox();
        for y in y0.max(0)..=y1.min(h - 1) {
            for x in x0.max(0)..=x1.min(w - 1) {
                if o.covers(x, y) {
                    owner[(y * w + x) as usize] = Some(o.id);
                }
            }
        }
    }
    owner
}

/// Rasterises a scene; masks are returned in object-list order and
/// partition the object pixels (occluded pixels go to the topmost object).
pub fn render(scene: &SceneSpec) -> (Raster, Vec<ObjectMask>) {
    let owner = owner_map(scene);
    let mut raster = Raster::filled(scene.width, scene.height, scene.background.rgb());
    for (i, o) in owner.iter().enumerate() {
        if let Some(id) = o {
            let obj = scene.object(*id).expect("owner ids come from the scene");
            let (x, y) = (i as u32 % scene.width, i as u32 / scene.width);
            raster.set(x, y, obj.color.rgb());
        }
    }
    let masks = scene
        .objects
        .iter()
        .map(|o| ObjectMask {
            object_id: o.id,
            width: scene.width,
            height: scene.height,
            grid: owner.iter().map(|p| *p == Some(o.id)).collect(),
        })
        .collect();
    (raster, masks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "attribute", content = "value", rename_all = "lowercase")]
pub enum AttrChange {
    Color(Color),
    Shape(Shape),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EditKind {
    Modify,
    Swap,
    Delete,
    Add,
}

impl EditKind {
    pub const ALL: [EditKind; 4] = [
        EditKind::Modify,
        EditKind::Swap,
        EditKind::Delete,
        EditKind::Add,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EditKind::Modify => "MODIFY",
            EditKind::Swap => "SWAP",
            EditKind::Delete => "DELETE",
            EditKind::Add => "ADD",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewObject {
    pub shape: Shape,
    pub color: Color,
    pub size: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "UPPERCASE")]
pub enum EditOp {
    Modify { target: u32, change: AttrChange },
    Swap { a: u32, b: u32 },
    Delete { target: u32 },
    Add { object: NewObject, center: (i32, i32) },
}

impl EditOp {
    pub fn kind(&self) -> EditKind {
        match self {
            EditOp::Modify { .. } => EditKind::Modify,
            EditOp::Swap { .. } => EditKind::Swap,
            EditOp::Delete { .. } => EditKind::Delete,
            EditOp::Add { .. } => EditKind::Add,
        }
    }

    /// Ids of the pre-existing objects this edit touches.
    pub fn touched(&self) -> Vec<u32> {
        match self {
            EditOp::Modify { target, .. } | EditOp::Delete { target } => vec![*target],
            EditOp::Swap { a, b } => vec![*a, *b],
            EditOp::Add { .. } => vec![],
        }
    }
}

/// The object an ADD would introduce, before it is given an id.
pub fn add_candidate(scene: &SceneSpec, object: NewObject, center: (i32, i32)) -> SceneObject {
    SceneObject {
        id: scene.objects.iter().map(|o| o.id + 1).max().unwrap_or(0),
        shape: object.shape,
        color: object.color,
        center,
        size: object.size,
        z: scene.objects.iter().map(|o| o.z + 1).max().unwrap_or(0),
    }
}

/// True when `cand` lies fully on the canvas and covers only BACKGROUND
/// pixels of `scene`, at least `margin` pixels away from any object pixel.
pub fn fits_on_background(scene: &SceneSpec, owner: &[Option<u32>], cand: &SceneObject, margin: i32) -> bool {
    let (w, h) = (scene.width as i32, scene.height as i32);
    let (x0, y0, x1, y1) = cand.bbox();
    let mut any = false;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if !cand.covers(x, y) {
                continue;
            }
            if x < 0 || y < 0 || x >= w || y >= h {
                return false;
            }
            any = true;
            for yy in (y - margin).max(0)..=(y + margin).min(h - 1) {
                for xx in (x - margin).max(0)..=(x + margin).min(w - 1) {
                    if owner[(yy * w + xx) as usize].is_some() {
                        return false;
                    }
                }
            }
        }
    }
    any
}

/// Applies an edit symbolically. All untouched objects are carried over
/// unchanged.
pub fn apply_edit(scene: &SceneSpec, edit: &EditOp) -> Result<SceneSpec> {
    let mut out = scene.clone();
    let need = |id: u32| {
        scene
            .object(id)
            .ok_or_else(|| Error::Edit(format!("object {id} not in scene")))
    };
    match edit {
        EditOp::Delete { target } => {
            need(*target)?;
            out.objects.retain(|o| o.id != *target);
        }
        EditOp::Swap { a, b } => {
            if a == b {
                return Err(Error::Edit("swap needs two distinct objects".into()));
            }
            let (ca, cb) = (need(*a)?.center, need(*b)?.center);
            out.object_mut(*a).expect("checked").center = cb;
            out.object_mut(*b).expect("checked").center = ca;
        }
        EditOp::Modify { target, change } => {
            let obj = out
                .object_mut(*target)
                .ok_or_else(|| Error::Edit(format!("object {target} not in scene")))?;
            match *change {
                AttrChange::Color(c) if c != obj.color => obj.color = c,
                AttrChange::Shape(s) if s != obj.shape => obj.shape = s,
                _ => return Err(Error::Edit("modify must change the attribute".into())),
            }
        }
        EditOp::Add { object, center } => {
            if object.size == 0 {
                return Err(Error::Edit("added object has zero size".into()));
            }
            let cand = add_candidate(scene, *object, *center);
            let owner = owner_map(scene);
            if !fits_on_background(scene, &owner, &cand, 0) {
                return Err(Error::NoBackground);
            }
            out.objects.push(cand);
        }
    }
    out.validate()?;
    Ok(out)
}

pub const REGION_NAMES: [[&str; 3]; 3] = [
    ["upper left", "upper middle", "upper right"],
    ["middle left", "center", "middle right"],
    ["lower left", "lower middle", "lower right"],
];

/// 3×3 region phrase for a pixel position.
pub fn region_phrase(center: (i32, i32), width: u32, height: u32) -> &'static str {
    let col = ((center.0.max(0) as u32 * 3) / width).min(2) as usize;
    let row = ((center.1.max(0) as u32 * 3) / height).min(2) as usize;
    REGION_NAMES[row][col]
}

/// Template sentence describing `edit` applied to `before`.
pub fn describe_edit(edit: &EditOp, before: &SceneSpec) -> Result<String> {
    let label = |id: u32| {
        before
            .object(id)
            .map(SceneObject::label)
            .ok_or_else(|| Error::Edit(format!("object {id} not in scene")))
    };
    Ok(match edit {
        EditOp::Delete { target } => format!("the {} was removed", label(*target)?),
        EditOp::Add { object, center } => format!(
            "a {} {} was added in the {}",
            object.color.name(),
            object.shape.name(),
            region_phrase(*center, before.width, before.height)
        ),
        EditOp::Swap { a, b } => {
            format!("the {} and the {} swapped places", label(*a)?, label(*b)?)
        }
        EditOp::Modify { target, change } => match change {
            AttrChange::Color(c) => format!("the {} turned {}", label(*target)?, c.name()),
            AttrChange::Shape(s) => format!("the {} became a {}", label(*target)?, s.name()),
        },
    })
}

/// Lists objects in draw order.
pub fn caption(scene: &SceneSpec) -> String {
    let objs = scene.draw_order();
    if objs.is_empty() {
        return "an empty scene".into();
    }
    let parts: Vec<String> = objs.iter().map(|o| format!("a {}", o.label())).collect();
    format!("a scene with {}", parts.join(" and "))
}
