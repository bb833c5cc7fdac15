//! Tunnel cross-sections and transverse simulation grids.
//!
//! Four cross-section families are supported, mirror-symmetric about the
//! tunnel axis `x = 0` with the floor at `y = 0`:
//!
//! 1. rectangular,
//! 2. arched — a semi-elliptic vault curving up from the floor,
//! 3. arched with vertical side walls up to a spring line, capped by a
//!    semi-ellipse,
//! 4. trapezoidal — straight side walls sloping from `width` at the floor to
//!    `top_width` at the ceiling.
//!
//! Grids are laid out so that a fine mesh (0.4λ) and a coarse mesh (3.2λ) of
//! the same section cover *exactly* the same physical extent with an 8×
//! linear cell-count ratio, which the super-resolution pairing relies on.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, SPEED_OF_LIGHT};

/// Linear cell-count ratio between paired fine and coarse grids.
pub const MESH_RATIO: usize = 8;

/// Coarse transverse mesh factor (cell size in wavelengths).
pub const COARSE_MESH_FACTOR: f64 = 3.2;

/// Fine transverse mesh factor (cell size in wavelengths).
pub const FINE_MESH_FACTOR: f64 = 0.4;

/// Free-space wavelength for a carrier frequency in Hz.
pub fn wavelength(frequency: f64) -> f64 {
    SPEED_OF_LIGHT / frequency
}

/// Default exterior padding around the section: 8 coarse cells, in meters.
///
/// The padding hosts the lossy wall medium and the absorbing taper that
/// suppresses wrap-around from the periodic spectral step.
pub fn default_guard_band(frequency: f64) -> f64 {
    8.0 * COARSE_MESH_FACTOR * wavelength(frequency)
}

/// The four tunnel cross-section families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionKind {
    Rectangular,
    Arched,
    ArchedVerticalWalls,
    Trapezoidal,
}

impl SectionKind {
    /// 1-based shape index used in parameter grids and file metadata.
    pub fn index(self) -> u8 {
        match self {
            SectionKind::Rectangular => 1,
            SectionKind::Arched => 2,
            SectionKind::ArchedVerticalWalls => 3,
            SectionKind::Trapezoidal => 4,
        }
    }

    pub fn from_index(index: u8) -> Option<Self> {
        match index {
            1 => Some(SectionKind::Rectangular),
            2 => Some(SectionKind::Arched),
            3 => Some(SectionKind::ArchedVerticalWalls),
            4 => Some(SectionKind::Trapezoidal),
            _ => None,
        }
    }
}

/// A tunnel cross-section in the transverse (x, y) plane.
///
/// `x` is measured from the tunnel centerline, `y` from the floor. `width`
/// is the floor width and `height` the maximum interior height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossSection {
    pub kind: SectionKind,
    pub width: f64,
    pub height: f64,
    /// Height where the elliptic cap begins (arched kinds). The plain arched
    /// kind curves from the floor, so its predicate ignores this value.
    pub arch_spring_height: f64,
    /// Ceiling width (trapezoidal kind only; equals `width` otherwise).
    pub top_width: f64,
}

/// Construct a validated cross-section.
///
/// `arch_spring_height` is required for the arched kinds and `top_width` for
/// the trapezoidal kind; both are ignored (and normalized) elsewhere.
pub fn make_cross_section(
    kind: SectionKind,
    width: f64,
    height: f64,
    arch_spring_height: f64,
    top_width: f64,
) -> Result<CrossSection> {
    if !(width > 0.0) || !(height > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "section dimensions must be positive (width {width}, height {height})"
        )));
    }
    match kind {
        SectionKind::Arched | SectionKind::ArchedVerticalWalls => {
            if !(0.0..height).contains(&arch_spring_height) {
                return Err(Error::InvalidConfig(format!(
                    "arch spring height {arch_spring_height} must lie in [0, {height})"
                )));
            }
        }
        SectionKind::Trapezoidal => {
            if !(top_width > 0.0) || top_width > width {
                return Err(Error::InvalidConfig(format!(
                    "trapezoid top width {top_width} must lie in (0, {width}]"
                )));
            }
        }
        SectionKind::Rectangular => {}
    }
    let spring = match kind {
        SectionKind::Arched | SectionKind::ArchedVerticalWalls => arch_spring_height,
        _ => 0.0,
    };
    let top = match kind {
        SectionKind::Trapezoidal => top_width,
        _ => width,
    };
    Ok(CrossSection {
        kind,
        width,
        height,
        arch_spring_height: spring,
        top_width: top,
    })
}

impl CrossSection {
    /// Paper default dimensions: 4 m wide, 4 m tall, spring line at 2 m,
    /// trapezoid ceiling 3 m.
    pub fn default_for(kind: SectionKind) -> CrossSection {
        make_cross_section(kind, 4.0, 4.0, 2.0, 3.0).expect("defaults are valid")
    }

    /// True when the point (x, y) lies in the interior air region.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        if y < 0.0 || y > self.height || x.abs() > self.width / 2.0 {
            return false;
        }
        let hw = self.width / 2.0;
        match self.kind {
            SectionKind::Rectangular => true,
            SectionKind::Arched => {
                // Single semi-elliptic vault springing from the floor.
                let ry = self.height;
                let t = 1.0 - (y / ry).powi(2);
                t >= 0.0 && x.abs() <= hw * t.sqrt()
            }
            SectionKind::ArchedVerticalWalls => {
                let s = self.arch_spring_height;
                if y <= s {
                    true
                } else {
                    let ry = self.height - s;
                    let t = 1.0 - ((y - s) / ry).powi(2);
                    t >= 0.0 && x.abs() <= hw * t.sqrt()
                }
            }
            SectionKind::Trapezoidal => {
                let half_at = hw + (self.top_width / 2.0 - hw) * (y / self.height);
                x.abs() <= half_at
            }
        }
    }
}

/// Uniform transverse grid: `nx` × `ny` cells of size `delta`, with the
/// center of cell (0, 0) at (`x_origin`, `y_origin`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub delta: f64,
    pub x_origin: f64,
    pub y_origin: f64,
}

impl GridSpec {
    /// x coordinate of the center of column `i`.
    pub fn x(&self, i: usize) -> f64 {
        self.x_origin + i as f64 * self.delta
    }

    /// y coordinate of the center of row `j`.
    pub fn y(&self, j: usize) -> f64 {
        self.y_origin + j as f64 * self.delta
    }

    /// Physical extent covered in x (cell spans included).
    pub fn extent_x(&self) -> f64 {
        self.nx as f64 * self.delta
    }

    pub fn extent_y(&self) -> f64 {
        self.ny as f64 * self.delta
    }

    /// Index of the cell whose center is nearest to (x, y).
    pub fn nearest_cell(&self, x: f64, y: f64) -> (usize, usize) {
        let clamp = |v: f64, n: usize| -> usize {
            let i = v.round();
            if i <= 0.0 {
                0
            } else if i as usize >= n {
                n - 1
            } else {
                i as usize
            }
        };
        (
            clamp((x - self.x_origin) / self.delta, self.nx),
            clamp((y - self.y_origin) / self.delta, self.ny),
        )
    }
}

/// Boolean interior mask: `true` = air, `false` = wall or exterior.
pub type Mask = ndarray::Array2<bool>;

/// Rasterize the interior of `section` onto `grid` by cell-center sampling.
pub fn rasterize_mask(section: &CrossSection, grid: &GridSpec) -> Mask {
    Mask::from_shape_fn((grid.nx, grid.ny), |(i, j)| {
        section.contains(grid.x(i), grid.y(j))
    })
}

/// Build a wavelength-scaled grid for `section` plus `guard_band` meters of
/// exterior padding on every side.
///
/// Cell size is `mesh_factor · λ`. Factors below 1 are treated as the fine
/// member of an 8:1 mesh pair and are laid out on the coarse-equivalent
/// spacing (8 cells per coarse cell), so paired calls with factors `m` and
/// `8m` cover identical extents with exactly 8× the cell counts.
pub fn grid_from_wavelength(
    frequency: f64,
    mesh_factor: f64,
    section: &CrossSection,
    guard_band: f64,
) -> Result<GridSpec> {
    if !(frequency > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "frequency must be positive, got {frequency}"
        )));
    }
    if !(mesh_factor > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "mesh factor must be positive, got {mesh_factor}"
        )));
    }
    if guard_band < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "guard band must be non-negative, got {guard_band}"
        )));
    }
    let delta = mesh_factor * wavelength(frequency);
    let (quantum, per_coarse) = if mesh_factor < 1.0 {
        (delta * MESH_RATIO as f64, MESH_RATIO)
    } else {
        (delta, 1)
    };

    let span_cells = (section.width.min(section.height) / quantum).ceil() as usize;
    if span_cells < 4 {
        return Err(Error::InvalidConfig(format!(
            "section spans only {span_cells} coarse cells (need >= 4) at {:.3} m spacing",
            quantum
        )));
    }

    let ext_x = section.width + 2.0 * guard_band;
    let ext_y = section.height + 2.0 * guard_band;
    let ncx = (ext_x / quantum).ceil().max(4.0) as usize;
    let ncy = (ext_y / quantum).ceil().max(4.0) as usize;
    let nx = ncx * per_coarse;
    let ny = ncy * per_coarse;

    Ok(GridSpec {
        nx,
        ny,
        delta,
        // Cell centers symmetric about x = 0 so mirror symmetry is exact.
        x_origin: -((nx - 1) as f64) * delta / 2.0,
        // Vertical padding split evenly below the floor and above the crown.
        y_origin: section.height / 2.0 - ((ny - 1) as f64) * delta / 2.0,
    })
}
