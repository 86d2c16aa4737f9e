//! Deterministic geometric feasibility of a single assembly action.
//!
//! An action "add part `p` to subassembly `v`" is feasible when
//! 1. the part can be translated on the voxel grid from a pose outside the target
//!    box to its target pose without hitting placed parts or the floor,
//! 2. the gripper can hold it at the target (grasp only), or can hold it one cell
//!    away and push it home (grasp + push), grasp-only being tried first, and
//! 3. the resulting subassembly is statically supported.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::world::{Cell, Instance, Occupancy, SubassemblyMask, FACE_STEPS, GRID};

/// Horizontal unit steps (+x, -x, +y, -y).
const HORIZONTAL_STEPS: [[i32; 3]; 4] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]];
/// Slack used for every strict inequality of the push criteria.
pub const PUSH_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GripperModel {
    /// Largest distance between the two tips, in voxel units.
    pub max_opening: f64,
    /// Cells occupied by one tip, relative to the cell it touches. Components are
    /// (outward along the closing axis, along the approach direction, lateral).
    /// The default is a finger cell, the cell behind it, and the palm cell behind
    /// the grasped cube.
    pub tip_footprint: Vec<[i32; 3]>,
    /// Directions the gripper may come from.
    pub approach: ApproachRule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproachRule {
    Any,
    /// From the sides or from above.
    NotFromBelow,
    /// Straight down only.
    FromAbove,
}

impl ApproachRule {
    /// `approach` points from the grasped cube toward the gripper body.
    pub fn allows(self, approach: [i32; 3]) -> bool {
        match self {
            ApproachRule::Any => true,
            ApproachRule::NotFromBelow => approach[2] >= 0,
            ApproachRule::FromAbove => approach[2] > 0,
        }
    }
}

impl Default for GripperModel {
    fn default() -> Self {
        GripperModel {
            max_opening: 3.0,
            tip_footprint: vec![[0, 0, 0], [0, 1, 0], [-1, 1, 0]],
            approach: ApproachRule::NotFromBelow,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeasibilityConfig {
    /// Maximum number of poses the insertion search may expand.
    pub budget: usize,
    /// Free cells around the target box that the insertion search may use.
    pub workspace_margin: i32,
    pub gripper: GripperModel,
    pub stability: StabilityRule,
    /// Whether the gripper tips travel with the part during insertion and must stay
    /// collision free along the whole path.
    pub carry_gripper: bool,
}

impl Default for FeasibilityConfig {
    fn default() -> Self {
        FeasibilityConfig {
            budget: 50_000,
            workspace_margin: 3,
            gripper: GripperModel::default(),
            stability: StabilityRule::CenterOfMass,
            carry_gripper: false,
        }
    }
}

impl FeasibilityConfig {
    /// Single-cell tips from any side, support-chain stability.
    pub fn lenient() -> Self {
        FeasibilityConfig {
            gripper: GripperModel {
                max_opening: 3.0,
                tip_footprint: vec![[0, 0, 0]],
                approach: ApproachRule::Any,
            },
            stability: StabilityRule::SupportChain,
            ..FeasibilityConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityRule {
    /// Any resting cell grounds a part.
    SupportChain,
    /// The part's center of mass must project into the convex hull of its resting cells.
    CenterOfMass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn unit(self) -> [i32; 3] {
        match self {
            Axis::X => [1, 0, 0],
            Axis::Y => [0, 1, 0],
            Axis::Z => [0, 0, 1],
        }
    }

    /// The four approach directions perpendicular to the axis, one per 90 degree yaw step.
    pub fn approach(self, yaw_index: u8) -> [i32; 3] {
        let dirs = match self {
            Axis::X => [[0, 1, 0], [0, 0, 1], [0, -1, 0], [0, 0, -1]],
            Axis::Y => [[0, 0, 1], [1, 0, 0], [0, 0, -1], [-1, 0, 0]],
            Axis::Z => [[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]],
        };
        dirs[usize::from(yaw_index % 4)]
    }

    pub fn is_horizontal(self) -> bool {
        self != Axis::Z
    }
}

/// Two-finger grasp on opposite faces of one unit cube of a part.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraspConfig {
    pub cube: Cell,
    pub axis: Axis,
    /// Rotation of the gripper about the closing axis, in multiples of 90 degrees.
    pub yaw_index: u8,
}

impl GraspConfig {
    /// Cells covered by both tips when closed on the cube.
    pub fn tip_cells(&self, gripper: &GripperModel) -> Vec<Cell> {
        let axis = self.axis.unit();
        let approach = self.axis.approach(self.yaw_index);
        let mut out = Vec::with_capacity(2 * gripper.tip_footprint.len());
        for side in [1, -1] {
            let outward = scale(axis, side);
            let anchor = self.cube.shifted(outward);
            out.extend(footprint_cells(anchor, outward, approach, gripper));
        }
        out
    }
}

/// Contact pair for pushing a part horizontally without rotating it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PushPlan {
    pub p_left: [f64; 3],
    pub p_right: [f64; 3],
    /// Inward surface normals at the contacts.
    pub n_left: [f64; 3],
    pub n_right: [f64; 3],
    /// Desired (unit, horizontal) moving direction.
    pub v_b: [f64; 3],
    pub p_cm: [f64; 3],
    /// Anchor cells of the left and right tips.
    pub tip_cells: [Cell; 2],
}

impl PushPlan {
    /// Re-evaluates the three contact criteria from the stored geometry:
    /// opening, normals along `v_b`, and opposite torque signs. Collision freedom
    /// of the tips is not part of this check.
    pub fn criteria(&self, max_opening: f64) -> [bool; 3] {
        let gap = sub(self.p_left, self.p_right);
        let opening = dot(gap, gap).sqrt() < max_opening - PUSH_TOLERANCE;
        let pushing = dot(self.n_left, self.v_b) > PUSH_TOLERANCE
            && dot(self.n_right, self.v_b) > PUSH_TOLERANCE;
        let tl = cross_z(sub(self.p_cm, self.p_left), self.v_b);
        let tr = cross_z(sub(self.p_cm, self.p_right), self.v_b);
        let opposite = (tl > PUSH_TOLERANCE && tr < -PUSH_TOLERANCE)
            || (tl < -PUSH_TOLERANCE && tr > PUSH_TOLERANCE);
        [opening, pushing, opposite]
    }
}

/// Voxel translations of a part, forward ordered from a start pose outside the
/// target box to the target pose `[0, 0, 0]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertionPath {
    pub poses: Vec<[i32; 3]>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InsertionSearch {
    Found(InsertionPath),
    /// Every reachable pose was expanded and none lies outside the target box.
    Unreachable { expanded: usize },
    /// The expansion budget ran out first.
    BudgetExhausted { expanded: usize },
}

impl InsertionSearch {
    pub fn path(&self) -> Option<&InsertionPath> {
        match self {
            InsertionSearch::Found(p) => Some(p),
            _ => None,
        }
    }

    pub fn is_found(&self) -> bool {
        matches!(self, InsertionSearch::Found(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Manipulation {
    Grasp(GraspConfig),
    /// Grasped at `offset` from the target, released, then pushed by `-offset`.
    GraspAndPush {
        offset: [i32; 3],
        grasp: GraspConfig,
        push: PushPlan,
    },
}

/// Outcome of every sub-check for one action.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionAssessment {
    /// Part-only insertion search (no gripper).
    pub insertion: InsertionSearch,
    pub plan: Option<ActionPlan>,
    pub stable: bool,
}

impl ActionAssessment {
    pub fn feasible(&self) -> bool {
        self.plan.is_some() && self.stable
    }
}

fn scale(v: [i32; 3], k: i32) -> [i32; 3] {
    [v[0] * k, v[1] * k, v[2] * k]
}

fn cross_i(a: [i32; 3], b: [i32; 3]) -> [i32; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn to_f(v: [i32; 3]) -> [f64; 3] {
    [f64::from(v[0]), f64::from(v[1]), f64::from(v[2])]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// z-component of `a x b`.
pub fn cross_z(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn footprint_cells(
    anchor: Cell,
    outward: [i32; 3],
    approach: [i32; 3],
    gripper: &GripperModel,
) -> impl Iterator<Item = Cell> + '_ {
    let lateral = cross_i(outward, approach);
    gripper.tip_footprint.iter().map(move |&[a, d, l]| {
        let at = |k: usize| outward[k] * a + approach[k] * d + lateral[k] * l;
        anchor.shifted([at(0), at(1), at(2)])
    })
}

/// A pushing tip comes down vertically beside the trailing face. Both tips sit on
/// the same side of the part, so footprint cells on the part side of the tip (the
/// palm spanning a grasped cube) do not apply.
fn push_footprint_cells(tip: Cell, outward: [i32; 3], gripper: &GripperModel) -> Vec<Cell> {
    let approach = [0, 0, 1];
    let lateral = cross_i(outward, approach);
    gripper
        .tip_footprint
        .iter()
        .filter(|f| f[0] >= 0)
        .map(|&[a, d, l]| {
            let at = |k: usize| outward[k] * a + approach[k] * d + lateral[k] * l;
            tip.shifted([at(0), at(1), at(2)])
        })
        .collect()
}

fn centroid(cells: &[Cell]) -> [f64; 3] {
    let n = cells.len() as f64;
    let mut acc = [0.0; 3];
    for c in cells {
        let p = c.center();
        for k in 0..3 {
            acc[k] += p[k];
        }
    }
    [acc[0] / n, acc[1] / n, acc[2] / n]
}

/// Quasi-static support: a part is supported when one of its cells rests on the
/// floor (`z = 0`) or directly on a cell of an already supported part.
pub fn check_stability(instance: &Instance, v: SubassemblyMask) -> bool {
    unsupported_parts(instance, v, StabilityRule::SupportChain).is_empty()
}

pub fn check_stability_with(instance: &Instance, v: SubassemblyMask, rule: StabilityRule) -> bool {
    unsupported_parts(instance, v, rule).is_empty()
}

/// Parts of `v` that the support fixed point never grounds.
pub fn unsupported_parts(instance: &Instance, v: SubassemblyMask, rule: StabilityRule) -> Vec<usize> {
    let placed: Vec<usize> = v.parts().collect();
    let mut supported = vec![false; instance.m()];
    loop {
        let mut changed = false;
        for &p in &placed {
            if supported[p] {
                continue;
            }
            let part = instance.part(p);
            let resting: Vec<Cell> = part
                .cells
                .iter()
                .copied()
                .filter(|c| {
                    c.z == 0
                        || instance
                            .owner_of(c.shifted([0, 0, -1]))
                            .is_some_and(|below| below != p && v.contains(below) && supported[below])
                })
                .collect();
            let grounded = match rule {
                StabilityRule::SupportChain => !resting.is_empty(),
                StabilityRule::CenterOfMass => {
                    let com = part.center_of_mass();
                    !resting.is_empty() && in_support_polygon([com[0], com[1]], &resting)
                }
            };
            if grounded {
                supported[p] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    placed.into_iter().filter(|&p| !supported[p]).collect()
}

/// Point-in-convex-hull test against the union of the unit squares under `cells`
/// (boundary counts as inside).
pub fn in_support_polygon(point: [f64; 2], cells: &[Cell]) -> bool {
    let mut corners: Vec<(i32, i32)> = cells
        .iter()
        .flat_map(|c| [(c.x, c.y), (c.x + 1, c.y), (c.x, c.y + 1), (c.x + 1, c.y + 1)])
        .collect();
    corners.sort_unstable();
    corners.dedup();
    let hull = convex_hull(&corners);
    let n = hull.len();
    (0..n).all(|i| {
        let (ax, ay) = (f64::from(hull[i].0), f64::from(hull[i].1));
        let (bx, by) = (f64::from(hull[(i + 1) % n].0), f64::from(hull[(i + 1) % n].1));
        (bx - ax) * (point[1] - ay) - (by - ay) * (point[0] - ax) >= -PUSH_TOLERANCE
    })
}

/// Counter-clockwise hull of sorted, deduplicated integer points (monotone chain).
fn convex_hull(points: &[(i32, i32)]) -> Vec<(i32, i32)> {
    if points.len() < 3 {
        return points.to_vec();
    }
    let turn = |o: (i32, i32), a: (i32, i32), b: (i32, i32)| {
        i64::from(a.0 - o.0) * i64::from(b.1 - o.1) - i64::from(a.1 - o.1) * i64::from(b.0 - o.0)
    };
    let mut hull: Vec<(i32, i32)> = Vec::with_capacity(2 * points.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(i32, i32)>> = if pass == 0 {
            Box::new(points.iter())
        } else {
            Box::new(points.iter().rev())
        };
        for &pt in iter {
            while hull.len() >= start + 2 && turn(hull[hull.len() - 2], hull[hull.len() - 1], pt) <= 0 {
                hull.pop();
            }
            hull.push(pt);
        }
        hull.pop();
    }
    hull
}

/// Dense visited/parent table over translations within the workspace.
struct PoseTable {
    reach: i32,
    side: usize,
    parent: Vec<u32>,
}

impl PoseTable {
    const UNSEEN: u32 = u32::MAX;

    fn new(margin: i32) -> Self {
        let reach = GRID + margin;
        let side = (2 * reach + 1) as usize;
        PoseTable {
            reach,
            side,
            parent: vec![Self::UNSEEN; side * side * side],
        }
    }

    fn slot(&self, t: [i32; 3]) -> Option<usize> {
        let r = self.reach;
        if t.iter().any(|&c| c < -r || c > r) {
            return None;
        }
        let s = self.side;
        Some(
            (t[0] + r) as usize + s * ((t[1] + r) as usize) + s * s * ((t[2] + r) as usize),
        )
    }

    fn pose(&self, slot: usize) -> [i32; 3] {
        let s = self.side;
        let r = self.reach;
        [
            (slot % s) as i32 - r,
            ((slot / s) % s) as i32 - r,
            (slot / (s * s)) as i32 - r,
        ]
    }
}

/// True when the translated part fits the workspace, stays above the floor and
/// misses every obstacle.
pub fn pose_is_free(cells: &[Cell], t: [i32; 3], obstacles: &Occupancy, margin: i32) -> bool {
    let lo = -margin;
    let hi = GRID + margin;
    cells.iter().all(|c| {
        let q = c.shifted(t);
        (lo..hi).contains(&q.x)
            && (lo..hi).contains(&q.y)
            && (0..hi).contains(&q.z)
            && !obstacles.contains(q)
    })
}

fn carried_free(carried: &[Cell], t: [i32; 3], obstacles: &Occupancy) -> bool {
    carried.iter().all(|c| {
        let q = c.shifted(t);
        q.z >= 0 && !obstacles.contains(q)
    })
}

fn outside_target_box(cells: &[Cell], t: [i32; 3]) -> bool {
    cells.iter().all(|c| !c.shifted(t).in_grid())
}

/// Breadth-first search over unit translations of a part, run backward from the
/// target pose. `carried` cells (gripper tips) move rigidly with the part and must
/// stay collision free, but are not confined to the workspace.
pub fn search_insertion(
    cells: &[Cell],
    carried: &[Cell],
    obstacles: &Occupancy,
    margin: i32,
    budget: usize,
) -> InsertionSearch {
    let free = |t: [i32; 3]| pose_is_free(cells, t, obstacles, margin) && carried_free(carried, t, obstacles);
    let origin = [0, 0, 0];
    if !free(origin) {
        return InsertionSearch::Unreachable { expanded: 0 };
    }
    let mut table = PoseTable::new(margin);
    let start = table.slot(origin).expect("origin is inside the table");
    table.parent[start] = start as u32;
    let mut queue = VecDeque::from([start]);
    let mut expanded = 0usize;
    while let Some(slot) = queue.pop_front() {
        if expanded >= budget {
            return InsertionSearch::BudgetExhausted { expanded };
        }
        expanded += 1;
        let t = table.pose(slot);
        if outside_target_box(cells, t) {
            // Walking parents back to the target already yields start -> target order.
            let mut poses = vec![t];
            let mut cur = slot;
            while cur != start {
                cur = table.parent[cur] as usize;
                poses.push(table.pose(cur));
            }
            return InsertionSearch::Found(InsertionPath { poses });
        }
        for step in FACE_STEPS {
            let n = [t[0] + step[0], t[1] + step[1], t[2] + step[2]];
            let Some(ns) = table.slot(n) else { continue };
            if table.parent[ns] != PoseTable::UNSEEN {
                continue;
            }
            if free(n) {
                table.parent[ns] = slot as u32;
                queue.push_back(ns);
            }
        }
    }
    InsertionSearch::Unreachable { expanded }
}

pub fn find_insertion_path(
    instance: &Instance,
    v: SubassemblyMask,
    p: usize,
    config: &FeasibilityConfig,
) -> InsertionSearch {
    assert!(!v.contains(p), "part {p} is already placed");
    search_insertion(
        &instance.part(p).cells,
        &[],
        &instance.occupancy(v),
        config.workspace_margin,
        config.budget,
    )
}

/// Every grasp candidate in enumeration order: cubes from the top down (then by
/// y, x), axes x, y, z, yaw 0..4.
pub fn grasp_candidates(cells: &[Cell]) -> Vec<GraspConfig> {
    let mut cubes = cells.to_vec();
    cubes.sort_by_key(|c| (-c.z, c.y, c.x));
    let mut out = Vec::with_capacity(cubes.len() * 12);
    for cube in cubes {
        for axis in Axis::ALL {
            for yaw_index in 0..4 {
                out.push(GraspConfig { cube, axis, yaw_index });
            }
        }
    }
    out
}

fn grasp_allowed(g: &GraspConfig, gripper: &GripperModel) -> bool {
    gripper.approach.allows(g.axis.approach(g.yaw_index))
}

fn tips_clear(tips: impl IntoIterator<Item = Cell>, cells: &[Cell], obstacles: &Occupancy) -> bool {
    tips.into_iter()
        .all(|t| t.z >= 0 && !obstacles.contains(t) && !cells.contains(&t))
}

/// First grasp whose tips touch neither obstacles, the part itself nor the floor.
pub fn grasp_at(cells: &[Cell], obstacles: &Occupancy, gripper: &GripperModel) -> Option<GraspConfig> {
    grasp_candidates(cells)
        .into_iter()
        .find(|g| grasp_allowed(g, gripper) && tips_clear(g.tip_cells(gripper), cells, obstacles))
}

pub fn select_grasp(
    instance: &Instance,
    v: SubassemblyMask,
    p: usize,
    gripper: &GripperModel,
) -> Option<GraspConfig> {
    assert!(!v.contains(p), "part {p} is already placed");
    grasp_at(&instance.part(p).cells, &instance.occupancy(v), gripper)
}

struct ContactCandidate {
    point: [f64; 3],
    inward: [f64; 3],
    tip: Cell,
}

/// Chooses two contact points on the part outline, in the horizontal plane through
/// its center of mass, from which pushing along `v_b` translates the part without
/// rotating it:
/// 1. the contacts are closer than the gripper opening and both tips are collision free,
/// 2. both inward normals have a positive component along `v_b`,
/// 3. the two contact torques about the center of mass have opposite signs.
///
/// Among valid pairs the one with the smallest net torque wins. Returns `None` when
/// `v_b` is zero or not horizontal.
pub fn select_push_contacts(
    cells: &[Cell],
    obstacles: &Occupancy,
    gripper: &GripperModel,
    v_b: [f64; 3],
) -> Option<PushPlan> {
    let norm = (v_b[0] * v_b[0] + v_b[1] * v_b[1]).sqrt();
    if norm <= PUSH_TOLERANCE || v_b[2].abs() > PUSH_TOLERANCE {
        return None;
    }
    let v_b = [v_b[0] / norm, v_b[1] / norm, 0.0];
    let p_cm = centroid(cells);
    let pz = p_cm[2];

    let mut candidates: Vec<ContactCandidate> = Vec::new();
    let mut section: Vec<Cell> = cells
        .iter()
        .copied()
        .filter(|c| f64::from(c.z) <= pz + PUSH_TOLERANCE && pz <= f64::from(c.z + 1) + PUSH_TOLERANCE)
        .collect();
    section.sort_by_key(|c| (c.z, c.y, c.x));
    for c in section {
        for step in HORIZONTAL_STEPS {
            let tip = c.shifted(step);
            if cells.contains(&tip) {
                continue;
            }
            let center = c.center();
            let point = [
                center[0] + 0.5 * f64::from(step[0]),
                center[1] + 0.5 * f64::from(step[1]),
                pz,
            ];
            let inward = to_f(scale(step, -1));
            if dot(inward, v_b) <= PUSH_TOLERANCE {
                continue;
            }
            let tip_free = tips_clear(push_footprint_cells(tip, step, gripper), cells, obstacles);
            if !tip_free || candidates.iter().any(|k| k.point == point) {
                continue;
            }
            candidates.push(ContactCandidate { point, inward, tip });
        }
    }

    let torque = |p: [f64; 3]| cross_z(sub(p_cm, p), v_b);
    let mut best: Option<(f64, PushPlan)> = None;
    for i in 0..candidates.len() {
        for j in (i + 1)..candidates.len() {
            let (a, b) = (&candidates[i], &candidates[j]);
            let gap = sub(a.point, b.point);
            if dot(gap, gap).sqrt() >= gripper.max_opening - PUSH_TOLERANCE {
                continue;
            }
            let (ta, tb) = (torque(a.point), torque(b.point));
            let (left, right, tl, tr) = if ta > 0.0 { (a, b, ta, tb) } else { (b, a, tb, ta) };
            if !(tl > PUSH_TOLERANCE && tr < -PUSH_TOLERANCE) {
                continue;
            }
            let imbalance = (tl + tr).abs();
            if best.as_ref().is_some_and(|(b, _)| *b <= imbalance) {
                continue;
            }
            best = Some((
                imbalance,
                PushPlan {
                    p_left: left.point,
                    p_right: right.point,
                    n_left: left.inward,
                    n_right: right.inward,
                    v_b,
                    p_cm,
                    tip_cells: [left.tip, right.tip],
                },
            ));
        }
    }
    best.map(|(_, plan)| plan)
}

/// How the part gets to its target: the manipulation plus the insertion path
/// (for grasp + push, the path ends at the pre-push pose).
#[derive(Clone, Debug, PartialEq)]
pub struct ActionPlan {
    pub manipulation: Manipulation,
    pub path: InsertionPath,
}

fn shift_path(path: InsertionPath, offset: [i32; 3]) -> InsertionPath {
    InsertionPath {
        poses: path
            .poses
            .into_iter()
            .map(|t| [t[0] + offset[0], t[1] + offset[1], t[2] + offset[2]])
            .collect(),
    }
}

/// Searches for a way to place `p`: every collision-free grasp at the target first
/// (grasp only), then grasps one horizontal cell away followed by a push.
///
/// With `carry_gripper` the insertion search moves the chosen grasp's tips along
/// with the part; otherwise the part alone must reach its target.
pub fn plan_action(
    instance: &Instance,
    v: SubassemblyMask,
    p: usize,
    config: &FeasibilityConfig,
) -> Option<ActionPlan> {
    assert!(!v.contains(p), "part {p} is already placed");
    let gripper = &config.gripper;
    let cells = &instance.part(p).cells;
    let obstacles = instance.occupancy(v);
    let search = |body: &[Cell], carried: &[Cell]| {
        search_insertion(body, carried, &obstacles, config.workspace_margin, config.budget)
    };
    let mut bare_path: Option<Option<InsertionPath>> = None;
    let mut bare = || {
        bare_path
            .get_or_insert_with(|| search(cells, &[]).path().cloned())
            .clone()
    };

    for grasp in grasp_candidates(cells) {
        if !grasp_allowed(&grasp, gripper) {
            continue;
        }
        let tips = grasp.tip_cells(gripper);
        if !tips_clear(tips.iter().copied(), cells, &obstacles) {
            continue;
        }
        let path = if config.carry_gripper {
            search(cells, &tips).path().cloned()
        } else {
            bare()
        };
        match path {
            Some(path) => {
                return Some(ActionPlan {
                    manipulation: Manipulation::Grasp(grasp),
                    path,
                })
            }
            // Without carried tips the path does not depend on the grasp.
            None if !config.carry_gripper => break,
            None => {}
        }
    }

    for offset in HORIZONTAL_STEPS {
        let shifted: Vec<Cell> = cells.iter().map(|c| c.shifted(offset)).collect();
        if shifted.iter().any(|&c| obstacles.contains(c)) {
            continue;
        }
        let push_dir = scale(offset, -1);
        let Some(push) = select_push_contacts(&shifted, &obstacles, gripper, to_f(push_dir)) else {
            continue;
        };
        let swept_clear = push
            .tip_cells
            .iter()
            .all(|t| !obstacles.contains(t.shifted(push_dir)));
        if !swept_clear {
            continue;
        }
        for grasp in grasp_candidates(&shifted) {
            if !grasp_allowed(&grasp, gripper) {
                continue;
            }
            let tips = grasp.tip_cells(gripper);
            if !tips_clear(tips.iter().copied(), &shifted, &obstacles) {
                continue;
            }
            let path = if config.carry_gripper {
                // Search in the frame of the pre-push pose, then express poses relative
                // to the target.
                search(&shifted, &tips).path().cloned().map(|p| shift_path(p, offset))
            } else {
                bare()
            };
            match path {
                Some(path) => {
                    return Some(ActionPlan {
                        manipulation: Manipulation::GraspAndPush { offset, grasp, push },
                        path,
                    })
                }
                None if !config.carry_gripper => return None,
                None => {}
            }
        }
    }
    None
}

/// Grasp-only first; otherwise grasp one cell away and push the part home. Ignores
/// the insertion path.
pub fn select_manipulation(
    instance: &Instance,
    v: SubassemblyMask,
    p: usize,
    gripper: &GripperModel,
) -> Option<Manipulation> {
    assert!(!v.contains(p), "part {p} is already placed");
    let cells = &instance.part(p).cells;
    let obstacles = instance.occupancy(v);
    if let Some(g) = grasp_at(cells, &obstacles, gripper) {
        return Some(Manipulation::Grasp(g));
    }
    for offset in HORIZONTAL_STEPS {
        let shifted: Vec<Cell> = cells.iter().map(|c| c.shifted(offset)).collect();
        if shifted.iter().any(|&c| obstacles.contains(c)) {
            continue;
        }
        let Some(grasp) = grasp_at(&shifted, &obstacles, gripper) else {
            continue;
        };
        let push_dir = scale(offset, -1);
        let Some(push) = select_push_contacts(&shifted, &obstacles, gripper, to_f(push_dir)) else {
            continue;
        };
        let swept_clear = push
            .tip_cells
            .iter()
            .all(|t| !obstacles.contains(t.shifted(push_dir)));
        if swept_clear {
            return Some(Manipulation::GraspAndPush { offset, grasp, push });
        }
    }
    None
}

/// Runs every sub-check and reports each outcome.
pub fn assess_action(
    instance: &Instance,
    v: SubassemblyMask,
    p: usize,
    config: &FeasibilityConfig,
) -> ActionAssessment {
    ActionAssessment {
        insertion: find_insertion_path(instance, v, p, config),
        plan: plan_action(instance, v, p, config),
        stable: check_stability_with(instance, v.with(p), config.stability),
    }
}

/// Feasibility of adding `p` to `v`; the cheap stability check runs first.
pub fn check_action_feasible(
    instance: &Instance,
    v: SubassemblyMask,
    p: usize,
    config: &FeasibilityConfig,
) -> bool {
    check_stability_with(instance, v.with(p), config.stability)
        && plan_action(instance, v, p, config).is_some()
}
