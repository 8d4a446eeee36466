import os

import numpy as np
import pytest

import ccm3d
from ccm_utilities.DatasetManifest import ManifestReader
from ccm_utilities.TensorContainer import write_tensors, read_tensors
from ccm_utilities.volumes import read_volume

SMALL = ['--extent', '16', '--per-layer', '10', '--n-test', '3']
SMALL_NET = ['--epochs', '1', '--depth', '2', '--base-channels', '4']


def run(*argv):
    return ccm3d.main(list(argv))


@pytest.fixture(scope='module')
def out(tmp_path_factory):
    d = str(tmp_path_factory.mktemp('out'))
    assert run('gen-data', '--out', d, *SMALL) == 0
    return d


def read_text(path):
    with open(path) as f:
        return f.read()


def test_gen_data_layout(out):
    for i in ('dataset', 'models', 'reports', 'volumes'):
        assert os.path.isdir(os.path.join(out, i))
    manifest = ManifestReader(os.path.join(out, 'dataset', 'single')).read()
    assert manifest.split_counts() == {'train': 25, 'validation': 2, 'test': 3}


def test_train_and_eval_are_reproducible(tmp_path):
    reports = []
    for run_dir in ('a', 'b'):
        d = str(tmp_path / run_dir)
        assert run('gen-data', '--out', d, *SMALL) == 0
        assert run('train', '--out', d, '--net', 'ann1_r', *SMALL_NET) == 0
        assert run('eval', '--out', d, '--net', 'ann1_r') == 0
        assert os.path.exists(os.path.join(d, 'reports', 'timing_train_ann1_r.txt'))
        assert os.path.exists(os.path.join(d, 'reports', 'timing_eval_ann1_r.txt'))
        reports.append(read_text(os.path.join(d, 'reports', 'eval_ann1_r.txt')))
    assert reports[0] == reports[1]
    assert 'test.ssim=' in reports[0]


def test_eval_without_a_model(out, capsys):
    assert run('eval', '--out', out, '--net', 'ann2') == 1
    assert 'ann2 model' in capsys.readouterr().err


def test_unknown_flag_is_a_usage_error():
    with pytest.raises(SystemExit) as e:
        run('gen-data', '--no-such-flag')
    assert e.value.code == 2


def test_config_precedence(tmp_path):
    config = str(tmp_path / 'config.txt')
    with open(config, 'w') as f:
        f.write('extent=32\nper-layer=10\nn-test=3  # small\n')
    d = str(tmp_path / 'from_config')
    assert run('gen-data', '--out', d, '--config', config) == 0
    assert ManifestReader(os.path.join(d, 'dataset', 'single')).read().extent == 32

    d = str(tmp_path / 'flag_wins')
    assert run('gen-data', '--out', d, '--config', config, '--extent', '16') == 0
    assert ManifestReader(os.path.join(d, 'dataset', 'single')).read().extent == 16


def test_unknown_config_key(tmp_path, capsys):
    config = str(tmp_path / 'config.txt')
    with open(config, 'w') as f:
        f.write('colour=blue\n')
    assert run('gen-data', '--out', str(tmp_path), '--config', config) == 1
    assert 'colour' in capsys.readouterr().err


def test_svd_train_and_recon(out):
    assert run('train', '--out', out, '--net', 'svd', '--rank-policy', 'fixed:64') == 0
    assert os.path.exists(os.path.join(out, 'models', 'svd.ccml'))
    assert run('recon', '--out', out, '--net', 'svd', '--index', '1') == 0
    img = read_tensors(os.path.join(out, 'reports', 'recon_svd_test1.tnsr'))[0]
    assert img.shape == (16, 16)
    assert os.path.exists(os.path.join(out, 'reports', 'recon_svd_test1.pgm'))
    assert run('recon', '--out', out, '--net', 'svd', '--index', '99') == 1


def test_volume_command(tmp_path):
    files = []
    for d in range(3):
        path = str(tmp_path / ('slice%d.tnsr' % d))
        write_tensors(path, [np.full((4, 4), d / 2.0)])
        files.append(path)
    out = str(tmp_path / 'out')
    assert run('volume', '--out', out, '--z-step', '25', '--name', 'stack', *files) == 0
    vol = read_volume(os.path.join(out, 'volumes', 'stack.tnsr'))
    assert vol.to_array().shape == (3, 4, 4)
    assert vol.z_step_um == 25.0
    assert run('volume', '--out', out) == 1


def test_bench(out, capsys):
    for net in ('ann1_r', 'ann1_c', 'ann2'):
        assert run('train', '--out', out, '--net', net, *SMALL_NET) == 0
    assert run('train', '--out', out, '--net', 'svd') == 0
    assert run('classify', '--out', out, '--index', '0') == 0
    assert os.path.exists(os.path.join(out, 'reports', 'classify_test0.txt'))
    capsys.readouterr()
    assert run('bench', '--out', out) == 0
    table = [i for i in capsys.readouterr().out.splitlines() if ' --- ' not in i]
    assert table[0].startswith('method\t')
    assert [i.split('\t')[0] for i in table[1:]] == ['ANN1_r', 'ANN1_c', 'ANN2', 'SVD']
    assert table == read_text(os.path.join(out, 'reports', 'bench.txt')).splitlines()


def test_config_sets_the_output_directory(tmp_path):
    d = str(tmp_path / 'from_config')
    config = str(tmp_path / 'config.txt')
    with open(config, 'w') as f:
        f.write('out=%s\nextent=16\nper-layer=10\nn-test=3\n' % d)
    assert run('gen-data', '--config', config) == 0
    assert ManifestReader(os.path.join(d, 'dataset', 'single')).read().extent == 16

    flag = str(tmp_path / 'flag_wins')
    assert run('gen-data', '--config', config, '--out', flag) == 0
    assert os.path.isdir(os.path.join(flag, 'dataset', 'single'))


def test_ann2_recon_writes_every_plane(out):
    assert run('train', '--out', out, '--net', 'ann2', *SMALL_NET) == 0
    assert run('recon', '--out', out, '--net', 'ann2', '--index', '2') == 0
    base = os.path.join(out, 'reports', 'recon_ann2_test2')
    assert read_tensors(base + '.tnsr')[0].shape == (16, 16, 3)
    for z in (1, 2, 3):
        assert os.path.exists('%s_layer%d.pgm' % (base, z))
    assert not os.path.exists(base + '.pgm')


def test_merged_training_and_insertion_scan(out):
    assert run('insert-scan', '--out', out) == 1
    assert run('gen-data', '--out', out, '--kind', 'merged', '--extent', '16', '--per-layer', '20', '--n-test', '3') == 0
    assert run('train', '--out', out, '--net', 'ann1_r_star', *SMALL_NET) == 0
    assert os.path.exists(os.path.join(out, 'models', 'ann1_r_star.ccmm'))
    assert 'dataset_digest=' in read_text(os.path.join(out, 'reports', 'train_ann1_r_star.txt'))

    assert run('insert-scan', '--out', out, '--max-depth', '200', '--beads', '5') == 0
    vol = read_volume(os.path.join(out, 'volumes', 'insert_scan.tnsr'))
    assert vol.to_array().shape == (5, 16, 16)
    assert vol.z_step_um == 50.0
    slice_dir = os.path.join(out, 'volumes', 'insert_scan_slices')
    assert sorted(os.listdir(slice_dir)) == ['slice_%03d.pgm' % d for d in range(5)]
