"""Command-line driver: simulation, inversion, training, sweeps, and
report emission. Every command is seeded, writes its resolved config into
the run directory, and never mutates its inputs.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric
divergence.
"""

import argparse
import csv
import os
import sys

import numpy as np

from . import config as cfgmod
from . import data as pdata
from . import encoders as enc
from . import forward as fwd
from . import io as pio
from . import losses as plosses
from . import retina
from . import surrogate as surr
from .errors import DataFormatError, DivergenceError, GeometryError, ParameterError

USAGE_EXIT, DATA_EXIT, DIVERGENCE_EXIT = 2, 3, 4


class UsageError(Exception):
    pass


def _common_flags(sp):
    sp.add_argument("--config", default=None, help="YAML run config")
    sp.add_argument("--base", default="desk", choices=["desk", "paper"],
                    help="preset the config file is merged over")
    sp.add_argument("--seed", type=int, default=None, help="override the config seed")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--cache-dir", default=None,
                    help="directory for cached axon-map containers")


def _load(args):
    cfg = cfgmod.load_config(args.config, base=args.base)
    if args.seed is not None:
        cfg.seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    cfgmod.save_config(cfg, os.path.join(args.out, "config.yaml"))
    return cfg


def _spiral(cfg):
    return retina.SpiralParams(curvature=cfg.field_spec.spiral_curvature,
                               mode=cfg.field_spec.spiral_mode, eye=cfg.field_spec.eye)


def _geometry(cfg, cache_dir=None):
    imp = cfg.implant
    layout = retina.build_implant(imp.rows, imp.cols, imp.pitch_um, imp.radius_um,
                                  retina.RetinalPoint(*imp.center))
    extent = cfg.resolved_extent()
    shape = tuple(cfg.field_spec.shape)
    params = _spiral(cfg)
    grid = None
    cache_path = None
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        key = (f"axonmap_h{shape[0]}w{shape[1]}s{cfg.field_spec.n_segments}"
               f"_e{int(round(extent))}_{params.mode}_c{params.curvature:g}_{params.eye}.axmp")
        cache_path = os.path.join(cache_dir, key)
        if os.path.exists(cache_path):
            grid = retina.load_axon_map(cache_path, extent)
    if grid is None:
        grid = retina.build_axon_map(shape, extent, cfg.field_spec.n_segments, params)
        if cache_path:
            retina.save_axon_map(grid, cache_path)
    cache = fwd.RenderCache.build(grid, layout)
    if cfg.prune_threshold > 0:
        lo = fwd.PatientParams(cfg.sampler["rho"][0], cfg.sampler["lam"][0])
        hi = fwd.PatientParams(cfg.sampler["rho"][1], cfg.sampler["lam"][1])
        cache = cache.prune((lo, hi), amp_max=20.0, freq_max=400.0,
                            threshold=cfg.prune_threshold)
    return layout, grid, cache


def _patient(cfg):
    return fwd.PatientParams().replace(**cfg.patient) if cfg.patient else fwd.PatientParams()


def _extractor(cfg):
    lc = cfg.loss
    if lc.feature_weights:
        return plosses.FeatureExtractor.from_container(lc.feature_weights, tap=lc.feature_tap)
    return plosses.FeatureExtractor.random(tuple(lc.feature_channels), seed=lc.feature_seed,
                                           tap=lc.feature_tap)


def _loss_setup(cfg):
    return enc.LossSetup(schedule=plosses.LossSchedule.from_config(cfg.loss.schedule),
                         fx=_extractor(cfg), laplacian_k=cfg.loss.laplacian_k,
                         signed=cfg.loss.signed_smooth)


def _report_weights():
    return plosses.LossWeights(cfgmod.REPORT_ALPHA, cfgmod.REPORT_BETA)


def _loss_report_rows(tag, comps):
    return [pio.format_loss_row(0, tag, *comps)]


def cmd_simulate(args):
    cfg = _load(args)
    layout, grid, cache = _geometry(cfg, args.cache_dir)
    stim = pio.read_stimulus_csv(args.stimulus, layout.n_electrodes)
    percept = fwd.render(stim, _patient(cfg), cache)
    pio.write_percept_png(os.path.join(args.out, "percept.png"), percept, cfg.display_clip)
    pio.write_percept_raw(os.path.join(args.out, "percept.f32"), percept)
    print(f"max brightness: {percept.max():.6g}")
    return 0


def cmd_invert(args):
    cfg = _load(args)
    layout, grid, cache = _geometry(cfg, args.cache_dir)
    phi = _patient(cfg)
    target = pdata.preprocess_image(pio.read_image(args.target) * 255.0,
                                    tuple(cfg.field_spec.shape))
    setup = _loss_setup(cfg)
    weights = _report_weights()
    if args.method == "naive":
        stim = enc.naive_encode(target, layout, grid)
    elif args.method == "direct":
        init = enc.naive_encode(target, layout, grid)
        res = enc.invert_direct(target, phi, init, cache, steps=args.steps, lr=args.lr,
                                setup=setup, weights=weights)
        stim = res.stimulus
        if res.warning:
            print("warning: inversion stopped early; best iterate returned")
    else:
        if not args.checkpoint:
            raise UsageError("--method encoder requires --checkpoint")
        net, _ = enc.load_encoder(args.checkpoint)
        stim = enc.encode(target, phi, net)
    percept = fwd.render(stim, phi, cache)
    pio.write_stimulus_csv(os.path.join(args.out, "stimulus.csv"), stim)
    pio.write_percept_png(os.path.join(args.out, "recon.png"), percept, cfg.display_clip)
    pio.write_percept_raw(os.path.join(args.out, "recon.f32"), percept)
    comps = plosses.joint_components(target, percept, weights, setup.fx, setup.laplacian_k,
                                     setup.signed)
    pio.write_loss_csv(os.path.join(args.out, "loss.csv"),
                       _loss_report_rows(f"invert-{args.method}", comps))
    print(f"joint loss: {comps[3]:.6g}")
    return 0


def _digit_sets(cfg, n, out_shape):
    targets = pdata.digit_targets(n, seed=cfg.seed, out_shape=out_shape)
    return pdata.split_target_set(targets, 0.2, cfg.seed)


def cmd_train(args):
    cfg = _load(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    cfg.train.seed = cfg.seed
    layout, grid, cache = _geometry(cfg, args.cache_dir)
    train_set, test_set = _digit_sets(cfg, args.digits, tuple(cfg.field_spec.shape))
    phi = _patient(cfg)
    sampler = pdata.fixed_phi(phi) if cfg.patient else pdata.PhiSampler(dict(cfg.sampler))
    setup = _loss_setup(cfg)
    initial = None
    if args.resume:
        initial, _ = enc.load_encoder(args.resume)

    def checkpoint_cb(epoch, net):
        if args.checkpoint_every and (epoch + 1) % args.checkpoint_every == 0:
            enc.save_encoder(os.path.join(args.out, f"encoder_epoch{epoch:04d}.ckpt"), net,
                             {"epoch": epoch})

    result = enc.train_encoder(train_set, sampler, enc.renderer_forward(cache), cache.n_e,
                               setup=setup, tcfg=cfg.train, val_targets=test_set,
                               initial_net=initial, checkpoint_cb=checkpoint_cb)
    enc.save_encoder(os.path.join(args.out, "encoder.ckpt"), result.net,
                     {"best_epoch": result.best_epoch})
    rows = list(result.log_rows)
    weights = _report_weights()
    naive_stims = np.stack([enc.naive_encode(t, layout, grid) for t in test_set.images])
    naive_percepts = fwd.render_batch(naive_stims, phi, cache)
    naive_mean = np.mean([
        plosses.joint(t, p, weights, setup.fx, setup.laplacian_k, setup.signed)
        for t, p in zip(test_set.images, naive_percepts)
    ])
    enc_stims = enc.encode(test_set.images, phi, result.net)
    enc_percepts = fwd.render_batch(enc_stims, phi, cache)
    enc_mean = np.mean([
        plosses.joint(t, p, weights, setup.fx, setup.laplacian_k, setup.signed)
        for t, p in zip(test_set.images, enc_percepts)
    ])
    last_epoch = max(cfg.train.epochs - 1, 0)
    rows.append(pio.format_loss_row(last_epoch, "test-naive", 0, 0, 0, naive_mean))
    rows.append(pio.format_loss_row(last_epoch, "test-encoder", 0, 0, 0, enc_mean))
    pio.write_loss_csv(os.path.join(args.out, "log.csv"), rows)
    print(f"test joint: encoder {enc_mean:.6g} vs naive {naive_mean:.6g}")
    return 0


def cmd_train_surrogate(args):
    cfg = _load(args)
    if args.epochs is not None:
        cfg.surrogate.epochs = args.epochs
    if args.samples is not None:
        cfg.surrogate.n_samples = args.samples
    layout, grid, cache = _geometry(cfg, args.cache_dir)
    spec = surr.SurrogateDatasetSpec.from_config(cfg.surrogate)
    dataset = surr.gen_surrogate_dataset(spec, _patient(cfg), cache, seed=cfg.seed)
    if args.save_dataset:
        surr.save_surrogate_dataset(dataset, os.path.join(args.out, "dataset"))
    result = surr.train_surrogate(dataset, epochs=cfg.surrogate.epochs,
                                  batch_size=cfg.surrogate.batch_size, lr=cfg.surrogate.lr,
                                  weight_decay=cfg.surrogate.weight_decay,
                                  widths=tuple(cfg.surrogate.widths), seed=cfg.seed)
    surr.save_surrogate(os.path.join(args.out, "surrogate.ckpt"), result.net,
                        {"val_mae": result.val_mae})
    with open(os.path.join(args.out, "log.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "mae"])
        writer.writerows(result.log_rows)
    print(f"validation MAE: {result.val_mae:.6g}")
    return 0


def _parse_floats(text):
    try:
        return [float(v) for v in text.split(",") if v != ""]
    except ValueError as exc:
        raise UsageError(f"cannot parse float list {text!r}: {exc}") from exc


def cmd_sweep(args):
    cfg = _load(args)
    layout, grid, cache = _geometry(cfg, args.cache_dir)
    _, test_set = _digit_sets(cfg, args.digits, tuple(cfg.field_spec.shape))
    setup = _loss_setup(cfg)
    weights = _report_weights()
    base_phi = _patient(cfg)
    cells = []
    if args.coef:
        name, _, values = args.coef.partition("=")
        if not values:
            raise UsageError("--coef expects NAME=v1,v2,...")
        for v in _parse_floats(values):
            cells.append(base_phi.replace(**{name: v}))
    else:
        rhos = _parse_floats(args.rhos)
        lams = _parse_floats(args.lams)
        if not rhos or not lams:
            raise UsageError("sweep grid must be nonempty")
        for rho in rhos:
            for lam in lams:
                cells.append(base_phi.replace(rho=rho, lam=lam))
    encoders = {"naive": None}
    if args.checkpoint:
        encoders["encoder"], _ = enc.load_encoder(args.checkpoint)
    rows = []
    for phi in cells:
        for enc_name, net in encoders.items():
            if net is None:
                stims = np.stack([enc.naive_encode(t, layout, grid) for t in test_set.images])
            else:
                stims = enc.encode(test_set.images, phi, net)
            percepts = fwd.render_batch(stims, phi, cache)
            joints = [plosses.joint(t, p, weights, setup.fx, setup.laplacian_k, setup.signed)
                      for t, p in zip(test_set.images, percepts)]
            mean_joint = float(np.mean(joints))
            rows.append([f"{phi.rho:g}", f"{phi.lam:g}", f"{phi.a[2]:g}", f"{phi.a[3]:g}",
                         f"{phi.a[5]:g}", enc_name, f"{mean_joint:.9g}",
                         f"{np.log(mean_joint):.9g}"])
            pio.write_percept_png(
                os.path.join(args.out, f"example_{enc_name}_rho{phi.rho:g}_lam{phi.lam:g}"
                             f"_a2{phi.a[2]:g}_a3{phi.a[3]:g}_a5{phi.a[5]:g}.png"),
                percepts[0], cfg.display_clip)
    with open(os.path.join(args.out, "sweep.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rho", "lambda", "a2", "a3", "a5", "encoder", "joint_mean",
                         "log_joint_mean"])
        writer.writerows(rows)
    print(f"wrote {len(rows)} sweep rows")
    return 0


def cmd_gap_report(args):
    cfg = _load(args)
    layout, grid, cache = _geometry(cfg, args.cache_dir)
    net, _ = enc.load_encoder(args.encoder)
    sur, _ = surr.load_surrogate(args.surrogate)
    phi = fwd.PatientParams.from_vector(sur.phi_vec.numpy())
    _, test_set = _digit_sets(cfg, args.targets, tuple(cfg.field_spec.shape))
    spec = surr.SurrogateDatasetSpec.from_config(cfg.surrogate)
    report = surr.exploit_gap(lambda t: enc.encode(t, phi, net), sur, cache,
                              test_set.images, spec, seed=cfg.seed,
                              weights=_report_weights(), fx=_extractor(cfg))
    report.write_csv(os.path.join(args.out, "gap.csv"))
    print(f"mean gap proposed {report.mean_gap_proposed:.6g} "
          f"vs random {report.mean_gap_random:.6g}")
    return 0


def cmd_filter_dataset(args):
    cfg = _load(args)
    records = pdata.load_manifest(args.manifest)
    categories = [c for c in args.categories.split(",") if c]
    if not categories:
        raise UsageError("--categories must list at least one category")
    kept, removed = pdata.filter_annotations(records, categories)
    with open(os.path.join(args.out, "kept_ids.txt"), "w", encoding="utf-8") as fh:
        fh.writelines(rec.image_id + "\n" for rec in kept)
    with open(os.path.join(args.out, "removal_counts.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["criterion", "removed"])
        for key in pdata.REMOVAL_KEYS:
            writer.writerow([key, removed[key]])
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(kept))
    n_test = int(round(len(kept) * args.test_frac))
    test_ids = {kept[i].image_id for i in perm[:n_test]}
    for name, selector in (("train_ids.txt", lambda r: r.image_id not in test_ids),
                           ("test_ids.txt", lambda r: r.image_id in test_ids)):
        with open(os.path.join(args.out, name), "w", encoding="utf-8") as fh:
            fh.writelines(rec.image_id + "\n" for rec in kept if selector(rec))
    if args.images_dir and args.masks_dir:
        images, masks = {}, {}
        for rec in kept:
            img_path = os.path.join(args.images_dir, rec.image_id + ".png")
            if os.path.exists(img_path):
                images[rec.image_id] = pio.read_image(img_path) * 255.0
            for obj in rec.objects:
                mask_path = os.path.join(args.masks_dir, obj.mask_ref + ".png")
                if obj.mask_ref and os.path.exists(mask_path):
                    masks[obj.mask_ref] = pio.read_image(mask_path) > 0.5
        targets, skipped = pdata.segment_targets(kept, images, masks, categories,
                                                 tuple(cfg.field_spec.shape))
        tdir = os.path.join(args.out, "targets")
        os.makedirs(tdir, exist_ok=True)
        for image_id, img in zip(targets.ids, targets.images):
            pio.write_percept_png(os.path.join(tdir, image_id + ".png"), img, 1.0)
        print(f"segmented {len(targets)} targets ({skipped} skipped)")
    print("removed per criterion: "
          + ", ".join(f"{k}={removed[k]}" for k in pdata.REMOVAL_KEYS))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="phosinv",
                                     description="phosphene forward model and stimulus inversion")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="render a stimulus CSV to a percept")
    _common_flags(sp)
    sp.add_argument("--stimulus", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("invert", help="find a stimulus for a target image")
    _common_flags(sp)
    sp.add_argument("--target", required=True)
    sp.add_argument("--method", required=True, choices=["naive", "direct", "encoder"])
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--lr", type=float, default=0.5)
    sp.set_defaults(func=cmd_invert)

    sp = sub.add_parser("train", help="train the encoder end to end")
    _common_flags(sp)
    sp.add_argument("--digits", type=int, default=2000)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.add_argument("--resume", default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("train-surrogate", help="fit the surrogate forward model")
    _common_flags(sp)
    sp.add_argument("--samples", type=int, default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--save-dataset", action="store_true")
    sp.set_defaults(func=cmd_train_surrogate)

    sp = sub.add_parser("sweep", help="loss heatmap over patient parameters")
    _common_flags(sp)
    sp.add_argument("--rhos", default="150,800")
    sp.add_argument("--lams", default="100,1500")
    sp.add_argument("--coef", default=None, help="sweep a coefficient: a5=0.1,0.3")
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--digits", type=int, default=64)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("gap-report", help="surrogate exploitation diagnostic")
    _common_flags(sp)
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--surrogate", required=True)
    sp.add_argument("--targets", type=int, default=50)
    sp.set_defaults(func=cmd_gap_report)

    sp = sub.add_parser("filter-dataset", help="apply the annotation filtering criteria")
    _common_flags(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--categories", required=True)
    sp.add_argument("--images-dir", default=None)
    sp.add_argument("--masks-dir", default=None)
    sp.add_argument("--test-frac", type=float, default=0.2)
    sp.set_defaults(func=cmd_filter_dataset)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (DataFormatError, GeometryError, ParameterError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except DivergenceError as exc:
        print(f"divergence: {exc} {exc.diagnostics}", file=sys.stderr)
        return DIVERGENCE_EXIT


if __name__ == "__main__":
    sys.exit(main())
