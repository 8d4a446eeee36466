#!/usr/bin/env python
import os
import sys
import time

import numpy as np

from ccm_utilities.errors import ConfigError, StateError
from ccm_utilities.utilities import log, make_out_dirs, write_key_values
from ccm_utilities.ConfigReader import ConfigReader
from ccm_utilities.DatasetManifest import ManifestReader, MANIFEST_NAME
from ccm_utilities.TensorContainer import read_tensors, write_tensors
from ccm_utilities.ForwardModel import load_forward_model, calibration_scan
from ccm_utilities.LinearReconstructor import fit_svd, reconstruct_linear, save_reconstructor, load_reconstructor, \
    DEFAULT_POLICY
from ccm_utilities.opticsim import DatasetConfig, build_dataset, FORWARD_MODEL_NAME
from ccm_utilities.networks import NetworkSpec, build_model, save_model, load_model
from ccm_utilities.training import TrainConfig, train, retrain_star, infer_reconstruct, infer_classify
from ccm_utilities.metrics import evaluate_model, evaluate_linear, metric_settings, bench, format_bench_table
from ccm_utilities.phantoms import BeadPhantom
from ccm_utilities.volumes import insertion_scan, assemble_volume, export_pgm, slice_paths

NETS = ['ann1_r', 'ann1_c', 'ann2', 'ann1_r_star', 'svd']
MODEL_FILES = {
    'ann1_r': 'ann1_r.ccmm',
    'ann1_c': 'ann1_c.ccmm',
    'ann2': 'ann2.ccmm',
    'ann1_r_star': 'ann1_r_star.ccmm',
    'svd': 'svd.ccml',
}

COMMANDS = {
    'gen-data': 'simulate a dataset',
    'train': 'train ann1_r, ann1_c, ann2, ann1_r_star or fit svd',
    'eval': 'train and test metrics of one model',
    'recon': 'reconstruct one CCM image',
    'classify': 'predict the layer of one CCM image',
    'insert-scan': 'reconstruct a bead phantom at increasing depths',
    'volume': 'stack 2D slices into one volume',
    'bench': 'compare every method on the test split',
}

# (flag, type, default, help) per subcommand, on top of --seed, --config and --out.
OPTIONS = {
    'gen-data': [
        ('extent', int, 32, 'Image side length in pixels.'),
        ('per-layer', int, 600, 'Samples per layer (merged datasets: number of merged samples).'),
        ('n-test', int, 180, 'Number of test samples. Validation takes 10%% of the rest.'),
        ('noise', float, 0.01, 'Standard deviation of the additive measurement noise.'),
        ('conditioning', float, 1.0, 'Singular value decay exponent of the forward model.'),
        ('kind', str, 'single', "Dataset kind: 'single' or 'merged'."),
        ('object-kind', str, 'mixed', "Objects: 'mixed', 'beads' or 'neuron'."),
        ('workers', int, 1, 'Worker processes for sample generation.'),
    ],
    'train': [
        ('net', str, 'ann1_r', 'Network to train: ' + ', '.join(NETS) + '.'),
        ('batch-size', int, 16, 'Mini-batch size.'),
        ('epochs', int, 15, 'Maximum number of epochs.'),
        ('lr', float, 1e-3, 'Adam learning rate.'),
        ('patience', int, 3, 'Epochs without validation improvement before stopping.'),
        ('depth', int, 3, 'U-Net encoder depth.'),
        ('base-channels', int, 16, 'U-Net channels at the first level.'),
        ('rank-policy', str, DEFAULT_POLICY, "(svd) 'energy:<tau>' or 'fixed:<k>'."),
        ('layer', int, 1, '(svd) Layer whose calibration data is inverted.'),
    ],
    'eval': [
        ('net', str, 'ann1_r', 'Network to evaluate: ' + ', '.join(NETS) + '.'),
    ],
    'recon': [
        ('net', str, 'ann1_r', 'Reconstructor: ann1_r, ann2, ann1_r_star or svd.'),
        ('input', str, '', 'TNSR file holding a CCM image. Defaults to a test sample.'),
        ('index', int, 0, 'Position of the test sample to reconstruct when no input is given.'),
    ],
    'classify': [
        ('input', str, '', 'TNSR file holding a CCM image. Defaults to a test sample.'),
        ('index', int, 0, 'Position of the test sample to classify when no input is given.'),
    ],
    'insert-scan': [
        ('max-depth', float, 700.0, 'Deepest tip position in um.'),
        ('z-step', float, 50.0, 'Depth step in um.'),
        ('thickness', float, 700.0, 'Phantom thickness in um.'),
        ('beads', int, 40, 'Number of beads in the phantom.'),
        ('diameter', float, 3.0, 'Bead diameter in pixels.'),
    ],
    'volume': [
        ('z-step', float, 50.0, 'Depth step between slices in um.'),
        ('z0', float, 0.0, 'Depth of the first slice in um.'),
        ('name', str, 'volume', 'Output volume name.'),
    ],
    'bench': [],
}


def dest(flag):
    return flag.replace('-', '_')


def resolve(command, args):
    """ Merge built-in defaults, the config file and explicit flags, in increasing precedence. """
    types = dict((dest(f), t) for f, t, _, _ in OPTIONS[command])
    types['seed'] = int
    types['out'] = str
    settings = dict((dest(f), d) for f, _, d, _ in OPTIONS[command])
    settings['seed'] = 0
    settings['out'] = 'out'
    if args.config:
        for k, v in ConfigReader(args.config).read().items():
            if k not in types:
                raise ConfigError('Unknown key %r in %s for %s' % (k, args.config, command))
            settings[k] = types[k](v)
    for k in types:
        v = getattr(args, k)
        if v is not None:
            settings[k] = v
    return settings


def require(path, what):
    if not os.path.exists(path):
        raise StateError('Missing %s: %s' % (what, path))
    return path


def dataset_dir(paths, kind):
    return os.path.join(paths['dataset'], kind)


def read_dataset(paths, kind):
    d = dataset_dir(paths, kind)
    require(os.path.join(d, MANIFEST_NAME), '%s dataset (run gen-data --kind %s first)' % (kind, kind))
    log('Reading the %s dataset' % kind)
    return ManifestReader(d).read()


def read_model(paths, net, extent=None):
    path = require(os.path.join(paths['models'], MODEL_FILES[net]), '%s model (run train --net %s first)' % (net, net))
    if net == 'svd':
        return load_reconstructor(path)
    return load_model(path, expected_extent=extent, expected_kind='ann1_r' if net == 'ann1_r_star' else net)


def check_net(net, allowed):
    if net not in allowed:
        raise ConfigError('--net must be one of %s, got %r' % (', '.join(allowed), net))


def gen_data(s, paths):
    config = DatasetConfig(extent=s['extent'], per_layer=s['per_layer'], n_test=s['n_test'], seed=s['seed'],
                           noise_sigma=s['noise'], conditioning=s['conditioning'], kind=s['kind'],
                           object_kind=s['object_kind'], workers=s['workers'])
    manifest = build_dataset(config, dataset_dir(paths, config.kind))
    counts = manifest.split_counts()
    log('Wrote %r samples (%r train, %r validation, %r test) to %s'
        % (len(manifest.samples), counts['train'], counts['validation'], counts['test'], manifest.directory))


def train_net(s, paths):
    net = s['net']
    check_net(net, NETS)
    if net == 'svd':
        manifest = read_dataset(paths, 'single')
        model = load_forward_model(os.path.join(manifest.directory, FORWARD_MODEL_NAME))
        log('Recording the layer-%r calibration scan' % s['layer'])
        _, calib = calibration_scan(model, s['layer'])
        r = fit_svd(calib, s['rank_policy'], layer=s['layer'])
        log('Kept %r of %r singular values' % (r.rank, min(calib.shape)))
        save_reconstructor(r, os.path.join(paths['models'], MODEL_FILES[net]))
        return

    config = TrainConfig(batch_size=s['batch_size'], max_epochs=s['epochs'], lr=s['lr'], patience=s['patience'],
                         seed=s['seed'])
    if net == 'ann1_r_star':
        manifest = read_dataset(paths, 'merged')
        spec = NetworkSpec('ann1_r', manifest.extent, depth=s['depth'], base_channels=s['base_channels'])
        model, report = retrain_star(manifest, config, spec)
    else:
        manifest = read_dataset(paths, 'single')
        spec = NetworkSpec(net, manifest.extent, depth=s['depth'], base_channels=s['base_channels'])
        model = build_model(spec, seed=s['seed'])
        log('Training %s' % net)
        report = train(model, manifest, config)
    save_model(model, os.path.join(paths['models'], MODEL_FILES[net]))
    write_key_values(os.path.join(paths['reports'], 'train_%s.txt' % net),
                     report.to_pairs() + config.to_pairs() + [('dataset_digest', manifest.digest())])
    write_key_values(os.path.join(paths['reports'], 'timing_train_%s.txt' % net), report.timing_pairs())


def eval_net(s, paths):
    net = s['net']
    check_net(net, NETS)
    manifest = read_dataset(paths, 'merged' if net == 'ann1_r_star' else 'single')
    model = read_model(paths, net, manifest.extent)
    timings = []
    pairs = [('net', net)]
    for split in ('train', 'test'):
        log('Evaluating %s on the %s split' % (net, split))
        if net == 'svd':
            report = evaluate_linear(model, manifest, split, timings)
        else:
            report = evaluate_model(model, manifest, split, timings)
        pairs += report.to_pairs(split + '.')
    write_key_values(os.path.join(paths['reports'], 'eval_%s.txt' % net), pairs + metric_settings())
    write_key_values(os.path.join(paths['reports'], 'timing_eval_%s.txt' % net),
                     [('median_ms', 1000.0 * float(np.median(timings))), ('n_calls', len(timings))])


def read_input(s, paths, kind='single'):
    """ The CCM image named by --input, or test sample number --index. """
    if s['input']:
        return read_tensors(require(s['input'], 'input image'))[0], os.path.splitext(os.path.basename(s['input']))[0]
    manifest = read_dataset(paths, kind)
    test = manifest.split('test')
    if not 0 <= s['index'] < len(test):
        raise ConfigError('--index %r is outside the %r test samples' % (s['index'], len(test)))
    return manifest.load(test[s['index']])[0], 'test%d' % s['index']


def recon(s, paths):
    net = s['net']
    check_net(net, ['ann1_r', 'ann2', 'ann1_r_star', 'svd'])
    ccm, name = read_input(s, paths, 'merged' if net == 'ann1_r_star' else 'single')
    model = read_model(paths, net, ccm.shape[0])
    if net == 'svd':
        out = reconstruct_linear(model, ccm)
    else:
        out = infer_reconstruct(model, ccm)
    base = os.path.join(paths['reports'], 'recon_%s_%s' % (net, name))
    write_tensors(base + '.tnsr', [np.asarray(out)])
    if np.ndim(out) == 3:
        for z in range(out.shape[-1]):
            export_pgm(out[..., z], '%s_layer%d.pgm' % (base, z + 1))
    else:
        export_pgm(out, base + '.pgm')
    log('Wrote %s.tnsr' % base)


def classify(s, paths):
    ccm, name = read_input(s, paths)
    model = read_model(paths, 'ann1_c', ccm.shape[0])
    layer, probs = infer_classify(model, ccm)
    log('%s: layer %r (probabilities %s)' % (name, layer, ' '.join('%.4f' % p for p in probs)))
    write_key_values(os.path.join(paths['reports'], 'classify_%s.txt' % name),
                     [('layer', layer)] + [('p%d' % (i + 1), float(p)) for i, p in enumerate(probs)])


def insert_scan(s, paths):
    manifest = read_dataset(paths, 'merged')
    model = read_model(paths, 'ann1_r_star', manifest.extent)
    forward_model = load_forward_model(os.path.join(manifest.directory, FORWARD_MODEL_NAME))
    phantom = BeadPhantom(manifest.extent, s['thickness'], n_beads=s['beads'], diameter_px=s['diameter'],
                          seed=s['seed'])
    log('Scanning %r down to %r um' % (phantom, s['max_depth']))
    vol = insertion_scan(model, phantom, forward_model, z_step_um=s['z_step'], max_depth_um=s['max_depth'],
                         rng=np.random.default_rng([s['seed'], 700]))
    path = os.path.join(paths['volumes'], 'insert_scan.tnsr')
    assemble_volume(vol, path)
    slice_dir = os.path.join(paths['volumes'], 'insert_scan_slices')
    if not os.path.exists(slice_dir):
        os.makedirs(slice_dir)
    for img, p in zip(vol.slices, slice_paths(slice_dir, 'slice', len(vol))):
        export_pgm(img, p)
    log('Wrote a %r-slice volume to %s' % (len(vol), path))


def volume(s, paths, slice_files):
    if not slice_files:
        raise ConfigError('volume needs at least one slice file')
    slices = []
    for f in slice_files:
        arrays = read_tensors(require(f, 'slice file'))
        slices.append(arrays[0])
    path = os.path.join(paths['volumes'], s['name'] + '.tnsr')
    assemble_volume(slices, path, z_step_um=s['z_step'], z0_um=s['z0'])
    log('Wrote %s' % path)


def bench_all(s, paths):
    manifest = read_dataset(paths, 'single')
    models = dict((n, read_model(paths, n, manifest.extent)) for n in ('ann1_r', 'ann1_c', 'ann2'))
    r = read_model(paths, 'svd')
    log('Benchmarking on %r test samples' % len(manifest.split('test')))
    table = format_bench_table(bench(models, r, manifest))
    with open(os.path.join(paths['reports'], 'bench.txt'), 'w') as f:
        f.write(table)
    print(table, end='')


def build_parser():
    import argparse

    parser = argparse.ArgumentParser(prog='ccm3d.py', description='3D computational cannula microscopy with neural networks')
    sub = parser.add_subparsers(dest='command', metavar='<command>')
    sub.required = True
    for command, options in OPTIONS.items():
        p = sub.add_parser(command, help=COMMANDS[command])
        p.add_argument('--seed', metavar='0', type=int, default=None, help='Seed of every random stream.')
        p.add_argument('--config', metavar='<config.txt>', type=str, default='', help='key=value file of option defaults.')
        p.add_argument('--out', metavar='out', type=str, default=None, help='Output directory.')
        for flag, t, d, h in options:
            p.add_argument('--' + flag, metavar=str(d) if d != '' else '<file>', type=t, default=None, help=h)
        if command == 'volume':
            p.add_argument('slices', metavar='<slice.tnsr>', nargs='*', help='2D slices in depth order.')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    start = time.perf_counter()
    try:
        s = resolve(args.command, args)
        paths = make_out_dirs(s['out'])
        if args.command == 'gen-data':
            gen_data(s, paths)
        elif args.command == 'train':
            train_net(s, paths)
        elif args.command == 'eval':
            eval_net(s, paths)
        elif args.command == 'recon':
            recon(s, paths)
        elif args.command == 'classify':
            classify(s, paths)
        elif args.command == 'insert-scan':
            insert_scan(s, paths)
        elif args.command == 'volume':
            volume(s, paths, args.slices)
        elif args.command == 'bench':
            bench_all(s, paths)
    except (ValueError, RuntimeError, ArithmeticError, OSError, KeyError) as e:
        print('ccm3d.py: error: %s' % e, file=sys.stderr)
        return 1
    log('goodbye (%.1f s)' % (time.perf_counter() - start))
    return 0


if __name__ == "__main__":
    sys.exit(main())
