use headsplat_core::eval::{closest_point_on_triangle, Bvh};
use headsplat_core::image::Image;
use headsplat_core::math::{rng_stream, Quat};
use headsplat_core::model::{face_adjacency, pose_mesh, procedural_head, triangle_frame, Pose};
use headsplat_core::objective::photometric_l1;
use headsplat_core::render::{render, Camera, RenderOptions};
use headsplat_core::rig::{bind_splat, densify_and_prune, face_counts, DensifyStats, GaussianPrototype, WorldSplat, MAX_PER_FACE};
use headsplat_core::shading::{shade, ShCoeffs};
use headsplat_core::Vec3;
use proptest::prelude::*;

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = Quat> {
    (vec3(1.0), 0.0..std::f64::consts::PI).prop_filter_map("axis", |(a, t)| {
        (a.norm() > 1e-3).then(|| Quat::from_axis_angle(&a, t))
    })
}

fn prototype(face: u32) -> impl Strategy<Value = GaussianPrototype> {
    (vec3(1.0), rotation(), -2.0..1.0f64, -2.0..1.0f64, -3.0..3.0f64).prop_map(move |(o, q, a, b, l)| {
        GaussianPrototype {
            parent_face: face,
            offset: o,
            rotation: q,
            log_scale: [a, b],
            opacity_logit: l,
            albedo: Vec3::new(0.5, 0.4, 0.3),
        }
    })
}

fn world_splat() -> impl Strategy<Value = WorldSplat> {
    (vec3(0.08), rotation(), 0.005..0.05f64, 0.005..0.05f64, 0.05..0.95f64).prop_map(|(c, q, a, b, o)| WorldSplat {
        center: c + Vec3::new(0.0, 0.0, 1.0),
        rotation: q.to_matrix(),
        scales: [a, b],
        opacity: o,
        albedo: Vec3::zeros(),
    })
}

fn colors(n: usize) -> Vec<Vec3> {
    (0..n).map(|i| Vec3::new(0.1 * (i % 7) as f64, 0.9, 0.3)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frames_and_binding_are_rigidly_equivariant(
        v in (vec3(1.0), vec3(1.0), vec3(1.0)),
        q in rotation(),
        t in vec3(2.0),
        p in prototype(0),
    ) {
        let Some(f) = triangle_frame(&v.0, &v.1, &v.2) else { return Ok(()); };
        prop_assume!(f.scale.min() > 1e-3);
        let r = q.to_matrix();
        let g = triangle_frame(&(r * v.0 + t), &(r * v.1 + t), &(r * v.2 + t)).unwrap();
        prop_assert!((g.rotation - r * f.rotation).abs().max() < 1e-9);
        prop_assert!((g.scale - f.scale).abs().max() < 1e-9);
        prop_assert!((g.centroid - (r * f.centroid + t)).abs().max() < 1e-9);
        let a = bind_splat(&p, &f);
        let b = bind_splat(&p, &g);
        prop_assert!((b.center - (r * a.center + t)).norm() < 1e-8);
        prop_assert!((b.rotation - r * a.rotation).abs().max() < 1e-9);
        prop_assert!((b.scales[0] - a.scales[0]).abs() < 1e-9 * a.scales[0].max(1.0));
        prop_assert!((b.scales[1] - a.scales[1]).abs() < 1e-9 * a.scales[1].max(1.0));
    }

    #[test]
    fn unposed_mesh_is_linear_in_codes(
        b1 in prop::collection::vec(-2.0..2.0f64, 10),
        b2 in prop::collection::vec(-2.0..2.0f64, 10),
        p1 in prop::collection::vec(-2.0..2.0f64, 10),
        p2 in prop::collection::vec(-2.0..2.0f64, 10),
    ) {
        let m = procedural_head();
        let pose = Pose::default();
        let zero = vec![0.0; 10];
        let base = pose_mesh(&m, &zero, &zero, &pose).unwrap();
        let a = pose_mesh(&m, &b1, &p1, &pose).unwrap();
        let b = pose_mesh(&m, &b2, &p2, &pose).unwrap();
        let bs: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| x + y).collect();
        let ps: Vec<f64> = p1.iter().zip(&p2).map(|(x, y)| x + y).collect();
        let s = pose_mesh(&m, &bs, &ps, &pose).unwrap();
        for i in 0..base.len() {
            prop_assert!((s[i] - base[i] - (a[i] - base[i]) - (b[i] - base[i])).norm() < 1e-12);
        }
    }

    #[test]
    fn neck_rotation_leaves_unweighted_vertices(q in rotation(), g in rotation(), t in vec3(1.0)) {
        let m = procedural_head();
        let zero = vec![0.0; 10];
        let rigid = Pose { global_rotation: g, global_translation: t.into(), neck_rotation: Quat::IDENTITY };
        let bent = Pose { neck_rotation: q, ..rigid };
        let a = pose_mesh(&m, &zero, &zero, &rigid).unwrap();
        let b = pose_mesh(&m, &zero, &zero, &bent).unwrap();
        for (i, w) in m.neck_weights.iter().enumerate() {
            if *w == 0.0 {
                prop_assert_eq!(a[i], b[i]);
            }
        }
    }

    #[test]
    fn alpha_never_drops_when_adding_a_splat(
        splats in prop::collection::vec(world_splat(), 1..8),
        extra in world_splat(),
    ) {
        let cam = Camera::new(24, 24);
        let opts = RenderOptions::default();
        let a = render(&splats, &colors(splats.len()), &cam, Vec3::zeros(), &opts).unwrap();
        let mut more = splats.clone();
        more.push(extra);
        let b = render(&more, &colors(more.len()), &cam, Vec3::zeros(), &opts).unwrap();
        for (x, y) in a.alpha.data.iter().zip(&b.alpha.data) {
            prop_assert!(*y >= x - opts.min_transmittance);
        }
    }

    #[test]
    fn background_enters_through_transmittance(
        splats in prop::collection::vec(world_splat(), 0..8),
        b1 in vec3(1.0),
        b2 in vec3(1.0),
    ) {
        let cam = Camera::new(20, 20);
        let opts = RenderOptions::default();
        let c = colors(splats.len());
        let r1 = render(&splats, &c, &cam, b1, &opts).unwrap();
        let r2 = render(&splats, &c, &cam, b2, &opts).unwrap();
        prop_assert_eq!(&r1.alpha, &r2.alpha);
        prop_assert_eq!(&r1.depth, &r2.depth);
        for p in 0..r1.alpha.pixels() {
            let t = 1.0 - r1.alpha.data[p];
            for k in 0..3 {
                let d = r1.color.data[3 * p + k] - r2.color.data[3 * p + k];
                prop_assert!((d - t * (b1[k] - b2[k])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn densify_respects_face_bounds(
        faces in prop::collection::vec(1usize..=MAX_PER_FACE, 1..12),
        n_prune in 0usize..20,
        n_densify in 0usize..20,
        seed in any::<u64>(),
    ) {
        let protos: Vec<GaussianPrototype> = faces
            .iter()
            .enumerate()
            .flat_map(|(f, &n)| (0..n).map(move |k| GaussianPrototype {
                parent_face: f as u32,
                opacity_logit: ((f * 7 + k * 3) % 11) as f64 - 5.0,
                ..GaussianPrototype::default()
            }))
            .collect();
        let mut stats = DensifyStats::new(protos.len(), 4);
        let op: Vec<f64> = protos.iter().map(|p| p.opacity()).collect();
        let gr: Vec<f64> = (0..protos.len()).map(|i| ((i * 13) % 5) as f64).collect();
        stats.update_magnitudes(&op, &gr).unwrap();
        let mut rng = rng_stream(seed, "densify");
        let out = densify_and_prune(&protos, &stats, faces.len(), n_prune, n_densify, 0.05, &mut rng).unwrap();
        for c in face_counts(&out.prototypes, faces.len()) {
            prop_assert!((1..=MAX_PER_FACE).contains(&c));
        }
        let delta = out.prototypes.len() as i64 - protos.len() as i64;
        prop_assert_eq!(delta, n_densify as i64 - n_prune as i64 - out.net_deficit());
        prop_assert_eq!(out.origin.len(), out.prototypes.len());
    }

    #[test]
    fn shading_is_linear_in_nonnegative_albedo(
        a in (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64),
        b in (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64),
        n in vec3(1.0),
        w in prop::collection::vec(-1.0..1.0f64, 27),
        k in 0.0..3.0f64,
    ) {
        prop_assume!(n.norm() > 1e-3);
        let n = n.normalize();
        let mut coeffs: ShCoeffs = [[0.0; 9]; 3];
        for (i, v) in w.iter().enumerate() {
            coeffs[i / 9][i % 9] = *v;
        }
        let a = Vec3::new(a.0, a.1, a.2);
        let b = Vec3::new(b.0, b.1, b.2);
        let sum = shade(&(a + b), &n, &coeffs);
        let parts = shade(&a, &n, &coeffs) + shade(&b, &n, &coeffs);
        prop_assert!((sum - parts).abs().max() < 1e-12);
        let scaled = shade(&(a * k), &n, &coeffs);
        prop_assert!((scaled - shade(&a, &n, &coeffs) * k).abs().max() < 1e-12);
    }

    #[test]
    fn l1_ignores_pixel_order(
        px in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64), 64),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let build = |order: &[usize]| {
            let mut t = Image::new(8, 8, 3);
            let mut r = Image::new(8, 8, 3);
            let mut m = Image::new(8, 8, 1);
            for (dst, &src) in order.iter().enumerate() {
                let p = px[src];
                t.data[3 * dst..3 * dst + 3].copy_from_slice(&[p.0, p.1, p.2]);
                r.data[3 * dst..3 * dst + 3].copy_from_slice(&[p.3, p.4, p.5]);
                m.data[dst] = p.6;
            }
            photometric_l1(&t, &r, &m).unwrap()
        };
        let id: Vec<usize> = (0..64).collect();
        let mut perm = id.clone();
        perm.shuffle(&mut rng_stream(seed, "perm"));
        prop_assert!((build(&id) - build(&perm)).abs() < 1e-12);
    }

    #[test]
    fn bvh_matches_exhaustive_search(
        verts in prop::collection::vec(vec3(1.0), 3..30),
        picks in prop::collection::vec((any::<usize>(), any::<usize>(), any::<usize>()), 1..40),
        queries in prop::collection::vec(vec3(2.0), 1..20),
    ) {
        let n = verts.len();
        let faces: Vec<[u32; 3]> = picks.iter().map(|(a, b, c)| [(a % n) as u32, (b % n) as u32, (c % n) as u32]).collect();
        let bvh = Bvh::build(&verts, &faces).unwrap();
        for q in &queries {
            let best = faces
                .iter()
                .map(|f| (closest_point_on_triangle(q, &verts[f[0] as usize], &verts[f[1] as usize], &verts[f[2] as usize]) - q).norm())
                .fold(f64::INFINITY, f64::min);
            let got = bvh.closest(q);
            prop_assert!((got.distance - best).abs() <= 1e-12 * best.max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn adjacency_is_symmetric_and_grows_with_degree(
        picks in prop::collection::vec((0u32..20, 0u32..20, 0u32..20), 1..40),
    ) {
        let faces: Vec<[u32; 3]> = picks.iter().map(|&(a, b, c)| [a, b, c]).collect();
        let n = faces.len();
        let a1 = face_adjacency(&faces, 1).unwrap();
        let a2 = face_adjacency(&faces, 2).unwrap();
        let a3 = face_adjacency(&faces, 3).unwrap();
        for i in 0..n {
            prop_assert!(a1.get(i, i));
            for j in 0..n {
                prop_assert_eq!(a1.get(i, j), a1.get(j, i));
                prop_assert_eq!(a2.get(i, j), a2.get(j, i));
                prop_assert!(!a1.get(i, j) || a2.get(i, j));
                prop_assert!(!a2.get(i, j) || a3.get(i, j));
                let square = (0..n).any(|k| a1.get(i, k) && a1.get(k, j));
                prop_assert_eq!(a2.get(i, j), square);
            }
        }
    }
}
