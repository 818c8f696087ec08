//! Monte Carlo ray tracing of ion fluorescence through the layered
//! trap/SPAD stack: collection efficiency versus lateral ion offset and
//! the resulting array-pitch optical crosstalk estimate.
//!
//! Geometry convention: the stack top surface (trap metal) is z = 0 with
//! z increasing downward; the ion sits at z = -ion_height on an axis
//! displaced laterally from the SPAD axis. All apertures and the SPAD
//! active disk are centered on the SPAD axis at x = y = 0.
//!
//! Metal planes absorb outside their apertures (optionally reflecting
//! specularly). Dielectric interfaces refract by Snell's law, with
//! Fresnel reflection optionally applied as an unpolarized Bernoulli
//! split. Oxide confinement of light entering through electrode gaps is
//! deliberately not modeled, so predicted crosstalk at large offsets is
//! a lower bound.

use crate::error::{Error, Result};
use crate::rng::{trial_stream, StreamRole, TrialRng};
use rand::Rng;
use rayon::prelude::*;

/// One layer of the stack, top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Absorbing metal plane with a circular clear aperture. The medium
    /// inside the aperture is the medium above the layer.
    Metal {
        thickness: f64,
        aperture_diameter: f64,
    },
    /// Transparent dielectric slab.
    Oxide { thickness: f64, index: f64 },
}

impl Layer {
    fn thickness(&self) -> f64 {
        match self {
            Layer::Metal { thickness, .. } | Layer::Oxide { thickness, .. } => *thickness,
        }
    }
}

/// Layered trap/SPAD geometry for ray tracing.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryStack {
    /// Ion height above the stack top surface, m.
    pub ion_height: f64,
    /// Layers from the trap surface down to the SPAD.
    pub layers: Vec<Layer>,
    /// Diameter of the SPAD photosensitive disk at the stack bottom, m.
    pub spad_active_diameter: f64,
    /// Lateral offset between ion axis and SPAD axis, m.
    pub lateral_offset: f64,
    /// Apply Fresnel reflection as a Bernoulli split at index steps.
    pub fresnel: bool,
    /// Track specular reflections (metal planes and total internal
    /// reflection) instead of terminating the ray.
    pub reflections: bool,
}

impl GeometryStack {
    /// The fabricated stack: 1 µm trap metal with a 30 µm clear
    /// aperture, 10 µm oxide, 0.5 µm ground plane, 2 µm oxide, 40 µm
    /// SPAD active diameter, ion 50 µm above the surface.
    ///
    /// The ground-plane aperture is not quoted; it defaults to the SPAD
    /// active diameter and is a parameter.
    pub fn paper_default() -> Self {
        GeometryStack {
            ion_height: 50e-6,
            layers: vec![
                Layer::Metal {
                    thickness: 1e-6,
                    aperture_diameter: 30e-6,
                },
                Layer::Oxide {
                    thickness: 10e-6,
                    index: 1.46,
                },
                Layer::Metal {
                    thickness: 0.5e-6,
                    aperture_diameter: 40e-6,
                },
                Layer::Oxide {
                    thickness: 2e-6,
                    index: 1.46,
                },
            ],
            spad_active_diameter: 40e-6,
            lateral_offset: 0.0,
            fresnel: true,
            reflections: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ion_height > 0.0) {
            return Err(Error::invalid("ion_height must be > 0"));
        }
        if !(self.spad_active_diameter > 0.0) {
            return Err(Error::invalid("spad_active_diameter must be > 0"));
        }
        for layer in &self.layers {
            match layer {
                Layer::Metal {
                    thickness,
                    aperture_diameter,
                } => {
                    if !(*thickness > 0.0) || !(*aperture_diameter > 0.0) {
                        return Err(Error::invalid(
                            "metal layers need positive thickness and aperture",
                        ));
                    }
                }
                Layer::Oxide { thickness, index } => {
                    if !(*thickness > 0.0) {
                        return Err(Error::invalid("oxide layers need positive thickness"));
                    }
                    if !(*index >= 1.0) {
                        return Err(Error::invalid("refractive indices must be >= 1"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Total stack thickness (top surface to the SPAD plane).
    pub fn depth(&self) -> f64 {
        self.layers.iter().map(Layer::thickness).sum()
    }

    /// Axial distance from the ion to the SPAD plane.
    pub fn ion_to_spad(&self) -> f64 {
        self.ion_height + self.depth()
    }

    fn interfaces(&self) -> Vec<Interface> {
        let mut ifaces = Vec::new();
        let mut z = 0.0;
        let mut n_above = 1.0; // vacuum above the stack
        for layer in &self.layers {
            match layer {
                Layer::Metal {
                    thickness,
                    aperture_diameter,
                } => {
                    // aperture checks at both faces approximate the hole wall
                    ifaces.push(Interface {
                        z,
                        kind: InterfaceKind::MetalFace {
                            aperture_radius: aperture_diameter / 2.0,
                        },
                    });
                    z += thickness;
                    ifaces.push(Interface {
                        z,
                        kind: InterfaceKind::MetalFace {
                            aperture_radius: aperture_diameter / 2.0,
                        },
                    });
                    // medium unchanged inside the aperture
                }
                Layer::Oxide { thickness, index } => {
                    if (*index - n_above).abs() > 1e-12 {
                        ifaces.push(Interface {
                            z,
                            kind: InterfaceKind::IndexStep {
                                n_above,
                                n_below: *index,
                            },
                        });
                    }
                    n_above = *index;
                    z += thickness;
                }
            }
        }
        ifaces
    }
}

#[derive(Debug, Clone, Copy)]
struct Interface {
    z: f64,
    kind: InterfaceKind,
}

#[derive(Debug, Clone, Copy)]
enum InterfaceKind {
    MetalFace { aperture_radius: f64 },
    IndexStep { n_above: f64, n_below: f64 },
}

/// Outcome of a single ray.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceResult {
    Hit,
    Miss,
}

const MAX_BOUNCES: usize = 16;

/// Propagate one ray through the stack.
///
/// `origin` is relative to the SPAD axis with z up-negative (the ion
/// sits at z = -ion_height). `direction` must be unit length within
/// 1e-9.
pub fn trace_ray(
    origin: [f64; 3],
    direction: [f64; 3],
    stack: &GeometryStack,
    rng: &mut impl Rng,
) -> Result<TraceResult> {
    let norm = (direction[0] * direction[0]
        + direction[1] * direction[1]
        + direction[2] * direction[2])
        .sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "direction must be normalized (|d| = {norm})"
        )));
    }
    let ifaces = stack.interfaces();
    let spad_z = stack.depth();
    let spad_r2 = (stack.spad_active_diameter / 2.0).powi(2);

    // cursor into the z-sorted interface list: going down the next
    // surface is ifaces[idx], going up it is ifaces[idx - 1]; this keeps
    // coincident interfaces (metal face touching an oxide step) in order
    let mut p = origin;
    let mut d = direction;
    let mut idx = 0usize;
    let mut bounces = 0;
    loop {
        if d[2] == 0.0 {
            return Ok(TraceResult::Miss);
        }
        let going_down = d[2] > 0.0;
        let itf = if going_down {
            if idx == ifaces.len() {
                // SPAD plane is terminal
                let t = (spad_z - p[2]) / d[2];
                let x = p[0] + t * d[0];
                let y = p[1] + t * d[1];
                return Ok(if x * x + y * y <= spad_r2 {
                    TraceResult::Hit
                } else {
                    TraceResult::Miss
                });
            }
            ifaces[idx]
        } else {
            if idx == 0 {
                return Ok(TraceResult::Miss); // escapes above the stack
            }
            ifaces[idx - 1]
        };
        let t = (itf.z - p[2]) / d[2];
        p = [p[0] + t * d[0], p[1] + t * d[1], itf.z];

        let reflect = |d: &mut [f64; 3], bounces: &mut usize| -> bool {
            if !stack.reflections {
                return false;
            }
            d[2] = -d[2];
            *bounces += 1;
            *bounces <= MAX_BOUNCES
        };

        match itf.kind {
            InterfaceKind::MetalFace { aperture_radius } => {
                let r2 = p[0] * p[0] + p[1] * p[1];
                if r2 <= aperture_radius * aperture_radius {
                    if going_down {
                        idx += 1;
                    } else {
                        idx -= 1;
                    }
                } else if !reflect(&mut d, &mut bounces) {
                    return Ok(TraceResult::Miss);
                }
            }
            InterfaceKind::IndexStep { n_above, n_below } => {
                let (n1, n2) = if going_down {
                    (n_above, n_below)
                } else {
                    (n_below, n_above)
                };
                let sin1 = (d[0] * d[0] + d[1] * d[1]).sqrt();
                let sin2 = sin1 * n1 / n2;
                if sin2 > 1.0 {
                    // total internal reflection
                    if !reflect(&mut d, &mut bounces) {
                        return Ok(TraceResult::Miss);
                    }
                    continue;
                }
                let cos1 = d[2].abs();
                let cos2 = (1.0 - sin2 * sin2).sqrt();
                if stack.fresnel && rng.random::<f64>() < fresnel_unpolarized(n1, n2, cos1, cos2) {
                    if !reflect(&mut d, &mut bounces) {
                        return Ok(TraceResult::Miss);
                    }
                    continue;
                }
                // bend the transverse components, keep the azimuth
                if sin1 > 1e-15 {
                    let scale = sin2 / sin1;
                    d[0] *= scale;
                    d[1] *= scale;
                }
                d[2] = cos2 * d[2].signum();
                if going_down {
                    idx += 1;
                } else {
                    idx -= 1;
                }
            }
        }
    }
}

/// Unpolarized Fresnel power reflectance.
fn fresnel_unpolarized(n1: f64, n2: f64, cos1: f64, cos2: f64) -> f64 {
    let rs = ((n1 * cos1 - n2 * cos2) / (n1 * cos1 + n2 * cos2)).powi(2);
    let rp = ((n1 * cos2 - n2 * cos1) / (n1 * cos2 + n2 * cos1)).powi(2);
    0.5 * (rs + rp)
}

/// Half-angle of the importance-sampling cone that bounds every ray able
/// to reach the SPAD, plus a 10% angular margin.
///
/// Only the topmost metal aperture, reached through vacuum, gives a
/// straight-line bound (refraction below it only bends rays toward the
/// axis). Without such a layer the full downward hemisphere is used.
fn sampling_cone_half_angle(offset: f64, stack: &GeometryStack) -> f64 {
    let half_pi = std::f64::consts::FRAC_PI_2;
    match stack.layers.first() {
        Some(Layer::Metal {
            aperture_diameter, ..
        }) => {
            let reach = offset.abs() + aperture_diameter / 2.0;
            let theta = (reach / stack.ion_height).atan() * 1.1;
            theta.min(half_pi)
        }
        _ => half_pi,
    }
}

/// Monte Carlo estimate of the collected fraction of 4π, with its
/// standard error.
///
/// Emission is isotropic; sampling is restricted to the cone bounding
/// the first aperture (importance sampling) and re-weighted by the cone
/// solid angle. `offset` overrides `stack.lateral_offset`.
pub fn collection_efficiency(
    offset: f64,
    stack: &GeometryStack,
    n_rays: u64,
    rng: &mut TrialRng,
) -> Result<(f64, f64)> {
    stack.validate()?;
    if n_rays < 10_000 {
        return Err(Error::invalid("collection efficiency needs >= 10^4 rays"));
    }
    let theta = sampling_cone_half_angle(offset, stack);
    let cos_min = theta.cos();
    let cone_fraction = (1.0 - cos_min) / 2.0; // cone solid angle / 4π
    let origin = [offset, 0.0, -stack.ion_height];
    let mut hits = 0u64;
    for _ in 0..n_rays {
        let cos_t = cos_min + (1.0 - cos_min) * rng.random::<f64>();
        let sin_t = (1.0 - cos_t * cos_t).sqrt();
        let phi = 2.0 * std::f64::consts::PI * rng.random::<f64>();
        let dir = [sin_t * phi.cos(), sin_t * phi.sin(), cos_t];
        if trace_ray(origin, dir, stack, rng)? == TraceResult::Hit {
            hits += 1;
        }
    }
    let p = hits as f64 / n_rays as f64;
    let se = (p * (1.0 - p) / n_rays as f64).sqrt();
    Ok((p * cone_fraction, se * cone_fraction))
}

/// Deterministic parallel version: rays are split into fixed batches
/// with per-batch RNG streams and exact integer hit tallies, so the
/// result is independent of thread count.
pub fn collection_efficiency_seeded(
    offset: f64,
    stack: &GeometryStack,
    n_rays: u64,
    master_seed: u64,
    batch_base: u64,
) -> Result<(f64, f64)> {
    stack.validate()?;
    if n_rays < 10_000 {
        return Err(Error::invalid("collection efficiency needs >= 10^4 rays"));
    }
    const BATCH: u64 = 16_384;
    let n_batches = n_rays.div_ceil(BATCH);
    let theta = sampling_cone_half_angle(offset, stack);
    let cos_min = theta.cos();
    let cone_fraction = (1.0 - cos_min) / 2.0;
    let origin = [offset, 0.0, -stack.ion_height];

    let hits: u64 = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = trial_stream(master_seed, batch_base + b, StreamRole::Aux);
            let count = BATCH.min(n_rays - b * BATCH);
            let mut h = 0u64;
            for _ in 0..count {
                let cos_t = cos_min + (1.0 - cos_min) * rng.random::<f64>();
                let sin_t = (1.0 - cos_t * cos_t).sqrt();
                let phi = 2.0 * std::f64::consts::PI * rng.random::<f64>();
                let dir = [sin_t * phi.cos(), sin_t * phi.sin(), cos_t];
                if trace_ray(origin, dir, stack, &mut rng).expect("validated stack")
                    == TraceResult::Hit
                {
                    h += 1;
                }
            }
            h
        })
        .sum();
    let p = hits as f64 / n_rays as f64;
    let se = (p * (1.0 - p) / n_rays as f64).sqrt();
    Ok((p * cone_fraction, se * cone_fraction))
}

/// One point of a crosstalk curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrosstalkPoint {
    pub offset: f64,
    pub collection_fraction: f64,
    pub std_error: f64,
    pub predicted_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrosstalkCurve {
    pub points: Vec<CrosstalkPoint>,
}

impl CrosstalkCurve {
    /// Curve normalized to its first point (unity at zero offset).
    pub fn normalized(&self) -> Vec<(f64, f64)> {
        let base = self
            .points
            .first()
            .map(|p| p.collection_fraction)
            .unwrap_or(1.0);
        self.points
            .iter()
            .map(|p| {
                (
                    p.offset,
                    if base > 0.0 {
                        p.collection_fraction / base
                    } else {
                        0.0
                    },
                )
            })
            .collect()
    }
}

/// Predicted SPAD count rate versus lateral ion offset.
///
/// `anchor_rate`, when given, pins the zero-offset prediction to a
/// measured rate; otherwise counts = scatter_rate × pde × efficiency.
pub fn crosstalk_curve(
    offsets: &[f64],
    stack: &GeometryStack,
    n_rays: u64,
    bright_ion_scatter_rate: f64,
    pde: f64,
    anchor_rate: Option<f64>,
    master_seed: u64,
) -> Result<CrosstalkCurve> {
    stack.validate()?;
    if offsets.is_empty() {
        return Err(Error::invalid("need at least one offset"));
    }
    for w in offsets.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::invalid("offsets must be ascending"));
        }
    }
    if offsets[0] < 0.0 {
        return Err(Error::invalid("offsets must be non-negative"));
    }
    let mut raw = Vec::with_capacity(offsets.len());
    for (i, &offset) in offsets.iter().enumerate() {
        let (eff, se) =
            collection_efficiency_seeded(offset, stack, n_rays, master_seed, (i as u64) << 32)?;
        raw.push((offset, eff, se));
    }
    let eff0 = if offsets[0] == 0.0 {
        raw[0].1
    } else {
        collection_efficiency_seeded(0.0, stack, n_rays, master_seed, u64::MAX >> 1)?.0
    };
    let scale = match anchor_rate {
        Some(rate) if eff0 > 0.0 => rate / eff0,
        Some(_) => 0.0,
        None => bright_ion_scatter_rate * pde,
    };
    Ok(CrosstalkCurve {
        points: raw
            .into_iter()
            .map(|(offset, eff, se)| CrosstalkPoint {
                offset,
                collection_fraction: eff,
                std_error: se,
                predicted_rate: scale * eff,
            })
            .collect(),
    })
}

/// Analytic solid-angle fraction of a disk of radius `r` seen on-axis
/// from distance `h`: (1 - cosθ)/2 with tanθ = r/h.
pub fn on_axis_disk_fraction(r: f64, h: f64) -> f64 {
    let cos = h / (h * h + r * r).sqrt();
    (1.0 - cos) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn straight_down_ray_hits() {
        let stack = GeometryStack::paper_default();
        let mut rng = trial_stream(1, 0, StreamRole::Aux);
        let res = trace_ray([0.0, 0.0, -50e-6], [0.0, 0.0, 1.0], &stack, &mut rng).unwrap();
        assert_eq!(res, TraceResult::Hit);
    }

    #[test]
    fn grazing_ray_blocked_by_trap_metal() {
        let stack = GeometryStack::paper_default();
        let mut rng = trial_stream(1, 1, StreamRole::Aux);
        let theta: f64 = 89f64.to_radians();
        let dir = [theta.sin(), 0.0, theta.cos()];
        let res = trace_ray([0.0, 0.0, -50e-6], dir, &stack, &mut rng).unwrap();
        assert_eq!(res, TraceResult::Miss);
    }

    #[test]
    fn non_normalized_direction_rejected() {
        let stack = GeometryStack::paper_default();
        let mut rng = trial_stream(1, 2, StreamRole::Aux);
        assert!(trace_ray([0.0, 0.0, -50e-6], [0.0, 0.0, 2.0], &stack, &mut rng).is_err());
    }

    #[test]
    fn snell_refraction_angle_and_endpoint() {
        // Oracle: 30° incidence onto n = 1.46 refracts to
        // asin(sin 30° / 1.46) = 20.0°; the endpoint on the SPAD plane
        // follows from straight-line geometry in each medium.
        let stack = GeometryStack {
            ion_height: 50e-6,
            layers: vec![Layer::Oxide {
                thickness: 12e-6,
                index: 1.46,
            }],
            spad_active_diameter: 1.0, // huge: only geometry matters
            lateral_offset: 0.0,
            fresnel: false,
            reflections: false,
        };
        let theta1: f64 = 30f64.to_radians();
        let theta2 = (theta1.sin() / 1.46).asin();
        assert_relative_eq!(theta2.to_degrees(), 20.0, epsilon = 0.06);

        // after 50 µm of vacuum and 12 µm of oxide:
        let expected_x = 50e-6 * theta1.tan() + 12e-6 * theta2.tan();
        // narrow SPAD centered on the expected endpoint decides hit/miss
        let mut probe = stack.clone();
        probe.spad_active_diameter = 0.2e-6;
        let mut rng = trial_stream(1, 3, StreamRole::Aux);
        let dir = [theta1.sin(), 0.0, theta1.cos()];
        // shift the ion so the refracted ray lands on the axis
        let res = trace_ray([-expected_x, 0.0, -50e-6], dir, &probe, &mut rng).unwrap();
        assert_eq!(res, TraceResult::Hit);
        // and a slightly different launch misses the 0.2 µm target
        let res = trace_ray([-expected_x - 1e-6, 0.0, -50e-6], dir, &probe, &mut rng).unwrap();
        assert_eq!(res, TraceResult::Miss);
    }

    #[test]
    fn efficiency_matches_analytic_cone_zero_offset() {
        // Oracle: small-aperture limit with refraction disabled (indices
        // = 1) reduces to the on-axis disk solid angle of the aperture.
        let mut stack = GeometryStack::paper_default();
        for layer in &mut stack.layers {
            if let Layer::Oxide { index, .. } = layer {
                *index = 1.0;
            }
        }
        stack.fresnel = false;
        // make the aperture the only stop: huge SPAD and ground aperture
        stack.spad_active_diameter = 1.0;
        if let Layer::Metal {
            aperture_diameter, ..
        } = &mut stack.layers[2]
        {
            *aperture_diameter = 1.0;
        }
        let n = 400_000;
        let (eff, se) = collection_efficiency_seeded(0.0, &stack, n, 99, 0).unwrap();
        // the trap aperture (30 µm dia) at its bottom face, 51 µm below
        // the ion, is the limiting stop
        let analytic = on_axis_disk_fraction(15e-6, 51e-6);
        assert!(
            (eff - analytic).abs() < 3.0 * se + 2e-4 * analytic,
            "MC {eff} vs analytic {analytic} (se {se})"
        );
    }

    #[test]
    fn efficiency_matches_spad_disk_when_unobstructed() {
        // unity indices and infinite apertures leave the SPAD active
        // disk as the only stop: the analytic solid angle from the ion
        let mut stack = GeometryStack::paper_default();
        for layer in &mut stack.layers {
            match layer {
                Layer::Oxide { index, .. } => *index = 1.0,
                Layer::Metal {
                    aperture_diameter, ..
                } => *aperture_diameter = 1.0,
            }
        }
        stack.fresnel = false;
        let n = 400_000;
        let (eff, se) = collection_efficiency_seeded(0.0, &stack, n, 101, 0).unwrap();
        let analytic = on_axis_disk_fraction(20e-6, stack.ion_to_spad());
        assert!(
            (eff - analytic).abs() < 3.0 * se + 2e-4 * analytic,
            "MC {eff} vs analytic {analytic} (se {se})"
        );
    }

    #[test]
    fn efficiency_is_even_in_offset() {
        let stack = GeometryStack::paper_default();
        let (e_plus, se_p) = collection_efficiency_seeded(10e-6, &stack, 200_000, 7, 0).unwrap();
        let (e_minus, se_m) =
            collection_efficiency_seeded(-10e-6, &stack, 200_000, 7, 1 << 40).unwrap();
        assert!(
            (e_plus - e_minus).abs() < 3.5 * (se_p + se_m),
            "f(+d) {e_plus} vs f(-d) {e_minus}"
        );
    }

    #[test]
    fn efficiency_zero_beyond_geometric_cutoff() {
        // With refraction disabled (unity indices) the geometry has a
        // hard cutoff: beyond it no line through the apertures reaches
        // the SPAD. (With refraction the oxide bends grazing rays back
        // toward the axis and the efficiency merely decays continuously,
        // which is why the refracting model is a lower bound rather than
        // zero at large offsets.)
        let mut stack = GeometryStack::paper_default();
        for layer in &mut stack.layers {
            if let Layer::Oxide { index, .. } = layer {
                *index = 1.0;
            }
        }
        stack.fresnel = false;
        let (eff, _) = collection_efficiency_seeded(300e-6, &stack, 100_000, 3, 0).unwrap();
        assert_eq!(eff, 0.0);
        // sanity: the refracting stack still collects a trickle there
        let refracting = GeometryStack::paper_default();
        let (eff_r, _) = collection_efficiency_seeded(300e-6, &refracting, 400_000, 3, 0).unwrap();
        assert!(eff_r < 1e-3);
    }

    #[test]
    fn hit_miss_tally_is_exact() {
        // energy accounting: hits + misses = n_rays, expressed through
        // the estimate being an exact multiple of the per-ray weight
        let stack = GeometryStack::paper_default();
        let n = 50_000u64;
        let mut rng = trial_stream(5, 0, StreamRole::Aux);
        let (eff, _) = collection_efficiency(0.0, &stack, n, &mut rng).unwrap();
        let theta = sampling_cone_half_angle(0.0, &stack);
        let cone = (1.0 - theta.cos()) / 2.0;
        let implied_hits = eff / cone * n as f64;
        assert_relative_eq!(implied_hits, implied_hits.round(), epsilon = 1e-6);
    }

    #[test]
    fn importance_sampling_agrees_with_full_sphere_oracle() {
        // Brute-force oracle: sample the full sphere uniformly and trace
        // every downward ray, no importance cone.
        let stack = GeometryStack::paper_default();
        let n = 2_000_000u64;
        let mut rng = trial_stream(9, 0, StreamRole::Aux);
        let mut hits = 0u64;
        for _ in 0..n {
            let cos_t = 1.0 - 2.0 * rng.random::<f64>(); // uniform on sphere
            let sin_t = (1.0 - cos_t * cos_t).sqrt();
            let phi = 2.0 * std::f64::consts::PI * rng.random::<f64>();
            let dir = [sin_t * phi.cos(), sin_t * phi.sin(), cos_t];
            if dir[2] > 0.0
                && trace_ray([0.0, 0.0, -stack.ion_height], dir, &stack, &mut rng).unwrap()
                    == TraceResult::Hit
            {
                hits += 1;
            }
        }
        let brute = hits as f64 / n as f64;
        let brute_se = (brute * (1.0 - brute) / n as f64).sqrt();
        let (eff, se) = collection_efficiency_seeded(0.0, &stack, 400_000, 11, 0).unwrap();
        assert!(
            (eff - brute).abs() < 3.5 * (se + brute_se),
            "importance {eff} vs brute force {brute}"
        );
    }

    #[test]
    fn standard_error_scales_inverse_sqrt() {
        let stack = GeometryStack::paper_default();
        let (_, se1) = collection_efficiency_seeded(0.0, &stack, 100_000, 13, 0).unwrap();
        let (_, se2) = collection_efficiency_seeded(0.0, &stack, 400_000, 13, 1 << 32).unwrap();
        let ratio = se1 / se2;
        assert!(
            (ratio - 2.0).abs() < 0.25,
            "se ratio for 4x rays: {ratio} (expected ~2)"
        );
    }

    #[test]
    fn efficiency_monotone_non_increasing_on_grid() {
        // 25-point grid over 0..480 µm
        let stack = GeometryStack::paper_default();
        let mut prev = f64::INFINITY;
        let mut prev_se = 0.0;
        for i in 0..25 {
            let d = i as f64 * 20e-6;
            let (eff, se) =
                collection_efficiency_seeded(d, &stack, 150_000, 17, (i as u64) << 32).unwrap();
            assert!(
                eff <= prev + 3.0 * (se + prev_se),
                "efficiency rose at {d}: {eff} after {prev}"
            );
            prev = eff;
            prev_se = se;
        }
    }

    #[test]
    fn crosstalk_curve_normalization_and_ratio() {
        let stack = GeometryStack::paper_default();
        let offsets: Vec<f64> = (0..=8).map(|i| i as f64 * 60e-6).collect();
        let curve =
            crosstalk_curve(&offsets, &stack, 200_000, 8.5e6, 0.35, Some(60_000.0), 21).unwrap();
        let norm = curve.normalized();
        assert_eq!(norm[0].1, 1.0);
        // anchored prediction at zero offset
        assert_relative_eq!(curve.points[0].predicted_rate, 60_000.0, max_relative = 1e-9);
        // monotone non-increasing within Monte Carlo error
        let base = curve.points[0].collection_fraction;
        for w in curve.points.windows(2) {
            assert!(
                w[1].collection_fraction
                    <= w[0].collection_fraction + 3.0 * (w[0].std_error + w[1].std_error),
                "rose at {} um: {} after {}",
                w[1].offset * 1e6,
                w[1].collection_fraction / base,
                w[0].collection_fraction / base
            );
        }
        // ratio at 300 µm (index 5): the refraction-assisted trickle is
        // well below the 0.01 bound
        assert!(norm[5].1 <= 0.01, "ratio at 300 um = {}", norm[5].1);
    }

    #[test]
    fn fresnel_reflectance_normal_incidence() {
        // ((n1-n2)/(n1+n2))^2 at normal incidence
        let r = fresnel_unpolarized(1.0, 1.46, 1.0, 1.0);
        assert_relative_eq!(r, (0.46f64 / 2.46).powi(2), max_relative = 1e-12);
    }
}
