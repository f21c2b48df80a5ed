"""
`mcaer` command line.

Exit codes: 0 success, 1 usage, 2 I/O, 3 strict cache failure, 4 training abort,
5 missing cue in strict mode.
"""
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
from tabulate import tabulate

from mcaer.checkpoint import load_checkpoint, load_configs
from mcaer.config import CliConfig
from mcaer.constants import CLASS_NAMES, STREAMS, ExitCode
from mcaer.cues import CueBundle, FaceBox, resolve_face
from mcaer.dataset import CueOptions, DatasetSpec, load_dataset, resolve_records, write_sidecar
from mcaer.detectors import detect_faces, make_detector
from mcaer.errors import CacheError, McaerError, SelfTestFailed
from mcaer.explain import gradcam, upscale
from mcaer.imageio import load_image, load_mask, save_pgm
from mcaer.logs import setup_logging
from mcaer.model import build_model, mcaer_forward
from mcaer.outputs import prometheus
from mcaer.preprocessing import PrepConfig, collate, prepare_sample, worker_count
from mcaer.selftest import format_results, run_selftest
from mcaer.synthetic import SIDECAR, generate_synthetic
from mcaer.tensor import no_grad
from mcaer.train import TrainConfig, evaluate, train

logger = logging.getLogger('mcaer.cli')


def run_guarded(call) -> int:
    """
    Run a click entry point and turn every failure into its exit code.
    """
    try:
        code = call()
    except click.ClickException as error:
        error.show()
        return ExitCode.USAGE
    except click.Abort:
        return ExitCode.USAGE
    except McaerError as error:
        logger.error('%s', error)
        return int(error.exit_code)
    except OSError as error:
        logger.error('%s', error)
        return ExitCode.IO
    return int(code or 0)


class McaerGroup(click.Group):
    def main(self, args=None, prog_name=None, standalone_mode=True, **extra):
        code = run_guarded(lambda: super(McaerGroup, self).main(args, prog_name, standalone_mode=False, **extra))
        if standalone_mode:
            sys.exit(code)
        return code


def echo_settings(title, settings: dict):
    logger.info('%s\n%s', title, tabulate(sorted(settings.items()), headers=["key", "value"]))


def parse_streams(ctx, param, value):
    if value is None:
        return None
    streams = tuple(stream.strip() for stream in value.split(",") if stream.strip())
    unknown = [stream for stream in streams if stream not in STREAMS]
    if unknown:
        raise click.BadParameter(f'unknown streams {unknown}, choose from {",".join(STREAMS)}')
    return streams


def parse_box(ctx, param, value):
    if value is None:
        return None
    try:
        x, y, w, h = (int(part) for part in value.split(","))
    except ValueError:
        raise click.BadParameter(f'expected x,y,w,h integers, got {value!r}')
    if w <= 0 or h <= 0:
        raise click.BadParameter(f'face box needs a positive size, got {value!r}')
    return FaceBox(x, y, w, h)


def default_annotations(data: Path, annotations):
    if annotations is not None:
        return Path(annotations)
    candidate = Path(data) / SIDECAR
    return candidate if candidate.exists() else None


@click.group(cls=McaerGroup)
@click.option('-v', '--verbose', is_flag=True, help='debug logging')
def cli(verbose):
    """Multi-cue adaptive emotion recognition."""
    setup_logging(logging.DEBUG if verbose else logging.INFO)


@cli.command()
@click.option('--out', required=True, type=click.Path(file_okay=False), help='output dataset root')
@click.option('--n', 'n_per_class', default=8, show_default=True, type=int, help='images per class')
@click.option('--seed', default=0, show_default=True, type=int)
def synth(out, n_per_class, seed):
    """Render a synthetic dataset with face, context and body signal for every class."""
    if n_per_class < 1:
        raise click.BadParameter(f'need at least one image per class, got {n_per_class}', param_hint='--n')
    echo_settings('synth', {"out": out, "n": n_per_class, "seed": seed})
    spec = generate_synthetic(n_per_class, seed, out)
    click.echo(f'wrote {n_per_class * len(CLASS_NAMES)} images to {spec.root}, annotations {spec.annotations}')


@cli.command()
@click.option('--data', required=True, type=click.Path(file_okay=False))
@click.option('--annotations', type=click.Path(dir_okay=False), help=f'sidecar, default DATA/{SIDECAR} when present')
@click.option('--out', required=True, type=click.Path(dir_okay=False), help='enriched sidecar')
@click.option('--strict/--lenient', default=False, show_default=True)
@click.option('--face-selector/--no-face-selector', default=True, show_default=True)
@click.option('--detector', help='external face detector command, default reads <image>.faces')
def cache(data, annotations, out, strict, face_selector, detector):
    """Select the principal face and person mask of every image once and store them."""
    annotations = default_annotations(data, annotations)
    echo_settings(
        'cache',
        {"data": data, "annotations": annotations, "out": out, "strict": strict, "face_selector": face_selector},
    )
    detector = make_detector(detector, missing_ok=not strict)
    options = CueOptions(use_face_selector=face_selector, strict=strict, detector=detector)
    dataset = load_dataset(DatasetSpec(data, annotations), options)
    records, failures = resolve_records(dataset, worker_count())
    write_sidecar(records, out)
    click.echo(f'cached {len(records) - len(failures)} of {len(records)} samples to {out}')
    if failures:
        click.echo(tabulate(failures, headers=["image", "error"]))
        if strict:
            raise CacheError(f'{len(failures)} samples could not be resolved')


@cli.command('train')
@click.option('--data', required=True, type=click.Path(file_okay=False))
@click.option('--annotations', type=click.Path(dir_okay=False))
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), help='YAML config file')
@click.option('--out', required=True, type=click.Path(dir_okay=False), help='checkpoint path')
@click.option('--history', type=click.Path(dir_okay=False), help='history log, default OUT.history')
@click.option('--streams', callback=parse_streams, help='face,context[,body]')
@click.option('--epochs', type=int)
@click.option('--batch-size', type=int)
@click.option('--lr', type=float, help='initial learning rate')
@click.option('--seed', type=int)
@click.option('--split-seed', default=0, show_default=True, type=int)
@click.option('--precision', type=click.Choice(["float32", "float64"]))
@click.option('--width-divisor', type=int, help='divide every channel width')
@click.option('--strict/--lenient', default=None)
@click.option('--scconv/--no-scconv', default=None, help='adaptive SCConv or a plain conv as the last context layer')
@click.option('--face-selector/--no-face-selector', default=None)
@click.option('--prep-pipeline/--no-prep-pipeline', default=None)
@click.option('--body-mask/--no-body-mask', default=None)
@click.option('--detector', help='external face detector command')
@click.option('--metrics-port', type=int, help='export training gauges for Prometheus on this port')
def train_command(data, annotations, config_path, out, history, streams, epochs, batch_size, lr, seed, split_seed,
                  precision, width_divisor, strict, scconv, face_selector, prep_pipeline, body_mask, detector,
                  metrics_port):
    """Train on the train split, keeping the checkpoint with the best validation accuracy."""
    config = CliConfig.load(config_path) if config_path else CliConfig()
    config = config.merge(
        {
            "model.enabled_streams": streams,
            "model.width_divisor": width_divisor,
            "model.context_use_scconv": scconv,
            "prep.use_prep_pipeline": prep_pipeline,
            "prep.body_use_mask": body_mask,
            "train.epochs": epochs,
            "train.batch_size": batch_size,
            "train.lr0": lr,
            "train.seed": seed,
            "train.precision": precision,
            "train.strict": strict,
            "train.use_face_selector": face_selector,
        }
    )
    config = replace(config, model=config.model.for_prep(config.prep))
    config.log_effective()

    annotations = default_annotations(data, annotations)
    history = Path(history) if history else Path(out).with_suffix('.history')
    strict = config.train.strict
    options = CueOptions(config.train.use_face_selector, strict, make_detector(detector, missing_ok=not strict))
    spec = DatasetSpec(data, annotations, split_seed=split_seed)
    train_set = load_dataset(spec.with_split("train"), options)
    val_set = load_dataset(spec.with_split("val"), options)

    model = build_model(config.model, seed=config.train.seed, dtype=config.train.dtype)
    on_epoch = None
    if metrics_port:
        prometheus.start(metrics_port)
        on_epoch = prometheus.export
    result = train(model, train_set, val_set, config.train, config.prep, out, history, on_epoch)
    click.echo(
        f'trained {len(result.records)} epochs, {result.steps} steps; '
        f'best epoch {result.best_epoch} val accuracy {result.best_val_acc}; checkpoint {out}'
    )


@cli.command('eval')
@click.option('--ckpt', required=True, type=click.Path(dir_okay=False))
@click.option('--data', required=True, type=click.Path(file_okay=False))
@click.option('--annotations', type=click.Path(dir_okay=False))
@click.option('--split', default="test", show_default=True, type=click.Choice(["train", "val", "test", "all"]))
@click.option('--split-seed', default=0, show_default=True, type=int)
@click.option('--batch-size', default=32, show_default=True, type=int)
@click.option('--strict/--lenient', default=False, show_default=True)
@click.option('--detector', help='external face detector command')
def eval_command(ckpt, data, annotations, split, split_seed, batch_size, strict, detector):
    """Accuracy, confusion matrix and per-class accuracy of a checkpoint on a dataset split."""
    model = load_checkpoint(ckpt)
    prep, train_config = load_configs(model, PrepConfig, TrainConfig)
    annotations = default_annotations(data, annotations)
    echo_settings(
        'eval',
        {"ckpt": ckpt, "data": data, "annotations": annotations, "split": split, "split_seed": split_seed,
         "streams": ",".join(model.config.streams), "strict": strict},
    )
    options = CueOptions(train_config.use_face_selector, strict, make_detector(detector, missing_ok=not strict))
    dataset = load_dataset(DatasetSpec(data, annotations, split=split, split_seed=split_seed), options)
    report = evaluate(model, dataset, prep, batch_size, strict)
    click.echo(report.format(model.class_names))


def scene_bundle(image_path, face, mask_path, lenient, detector, use_selector) -> CueBundle:
    image = load_image(image_path)
    height, width = image.shape[:2]
    flags = []
    if face is not None:
        clipped = face.clip(width, height)
        if clipped is None:
            raise click.BadParameter(f'face {face.as_list()} lies outside the {width}x{height} image', param_hint='--face')
        face = clipped
    else:
        boxes = detect_faces(image, make_detector(detector, missing_ok=lenient), image_path)
        face, substituted = resolve_face(boxes, width, height, use_selector, strict=not lenient)
        if substituted:
            flags.append('no-face')
    mask = load_mask(mask_path) if mask_path else None
    return CueBundle(image, face, mask, flags=flags)


def scene_batch(model, image_path, face, mask_path, lenient, detector):
    prep, train_config = load_configs(model, PrepConfig, TrainConfig)
    bundle = scene_bundle(image_path, face, mask_path, lenient, detector, train_config.use_face_selector)
    sample = prepare_sample(bundle, replace(prep, mode="eval"), model.config.streams, strict=not lenient)
    return collate([sample]).astype(model.dtype), bundle


def scene_options(command):
    options = [
        click.option('--ckpt', required=True, type=click.Path(dir_okay=False)),
        click.option('--image', 'image_path', required=True, type=click.Path(dir_okay=False)),
        click.option('--face', callback=parse_box, help='x,y,w,h face box instead of detection'),
        click.option('--mask', 'mask_path', type=click.Path(dir_okay=False), help='person mask image'),
        click.option('--lenient', is_flag=True, help='substitute missing cues instead of failing'),
        click.option('--detector', help='external face detector command, default reads <image>.faces'),
    ]
    for option in reversed(options):
        command = option(command)
    return command


@cli.command()
@scene_options
def infer(ckpt, image_path, face, mask_path, lenient, detector):
    """Predict the emotion of the principal person in one image."""
    model = load_checkpoint(ckpt)
    echo_settings(
        'infer', {"ckpt": ckpt, "image": image_path, "face": face, "mask": mask_path, "lenient": lenient}
    )
    batch, bundle = scene_batch(model, image_path, face, mask_path, lenient, detector)
    with no_grad():
        output = mcaer_forward(model, batch)
    probabilities = output.probabilities()[0]
    weights = output.weights.numpy()[0]
    best = int(probabilities.argmax())
    click.echo(f'prediction {model.class_names[best]} face {bundle.face.as_list()} {" ".join(bundle.flags)}'.rstrip())
    click.echo(tabulate(zip(model.class_names, probabilities), headers=["emotion", "probability"], floatfmt=".6f"))
    click.echo(tabulate(zip(model.config.streams, weights), headers=["stream", "weight"], floatfmt=".6f"))


@cli.command('gradcam')
@scene_options
@click.option('--class', 'class_name', required=True, type=click.Choice(CLASS_NAMES))
@click.option('--out', required=True, type=click.Path(dir_okay=False), help='heatmap as 8-bit PGM')
def gradcam_command(ckpt, image_path, face, mask_path, lenient, detector, class_name, out):
    """Grad-CAM heatmap of one class over the context stream, upscaled to the context input size."""
    model = load_checkpoint(ckpt)
    echo_settings('gradcam', {"ckpt": ckpt, "image": image_path, "class": class_name, "out": out, "lenient": lenient})
    batch, _ = scene_batch(model, image_path, face, mask_path, lenient, detector)
    result = gradcam(model, batch, model.class_names.index(class_name))
    heatmap = upscale(result.heatmap, model.config.context_h, model.config.context_w)
    save_pgm(heatmap, out)
    click.echo(f'{class_name} p={result.probability:.6f} heatmap {heatmap.shape[1]}x{heatmap.shape[0]} -> {out}')


@cli.command()
@click.option('--seeds', default=20, show_default=True, type=int, help='random seeds per gradient check')
@click.option('--suite', 'suites', multiple=True, type=click.Choice(["gradient", "shape", "invariant"]))
@click.option('--perturb-gradient', default=0.0, type=float, hidden=True)
def selftest(seeds, suites, perturb_gradient):
    """Finite-difference, shape and invariant checks of the whole network."""
    suites = suites or ("gradient", "shape", "invariant")
    echo_settings('selftest', {"seeds": seeds, "suites": ",".join(suites)})
    results = run_selftest(seeds, perturb_gradient, suites)
    click.echo(format_results(results))
    failed = [result.name for result in results if not result.passed]
    if failed:
        raise SelfTestFailed(f'{len(failed)} checks failed: {", ".join(failed)}')
    click.echo(f'all {len(results)} checks passed')


def main(argv=None) -> int:
    return cli.main(args=argv, prog_name='mcaer', standalone_mode=False)
