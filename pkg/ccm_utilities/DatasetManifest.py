import os

from ccm_utilities.errors import FormatError, ConfigError
from ccm_utilities.TensorContainer import read_tensors
from ccm_utilities.utilities import file_digest

MANIFEST_NAME = 'manifest.txt'
TABLE_MARKER = '#samples'
SPLITS = ('train', 'validation', 'test')


class SampleLine:
    """ Object to represent a single row of the manifest sample table. """

    def __init__(self, in_line):
        self.line = in_line.rstrip('\n').split('\t')
        if len(self.line) != 5:
            raise FormatError('Manifest rows need 5 tab-separated fields, got: %s' % in_line.rstrip())
        self.sample_id = int(self.line[0])
        self.path = self.line[1]
        self.label = self.line[2]
        self.z_um = float(self.line[3])
        self.split = self.line[4]

        if self.split not in SPLITS:
            raise FormatError('Unknown split %r for sample %r' % (self.split, self.sample_id))

    def __str__(self):
        return '\t'.join(self.line)

    @property
    def layer(self):
        """ 1-based layer index, or None for merged samples. """
        if self.label == 'merged':
            return None
        return int(self.label)


class DatasetManifest:
    """
    Index of a generated dataset: key=value metadata followed by a tab-separated table of
    (id, sample file, layer label, nominal depth, split). Sample files are relative to the
    manifest's directory.
    """

    def __init__(self, directory, meta, samples):
        self.directory = directory
        self.meta = meta
        self.samples = samples

    def __repr__(self):
        return '<DatasetManifest ' + self.directory + ' (%r samples)>' % len(self.samples)

    @property
    def kind(self):
        return self.meta.get('kind', 'single')

    @property
    def extent(self):
        return int(self.meta['extent'])

    @property
    def path(self):
        return os.path.join(self.directory, MANIFEST_NAME)

    def split(self, name):
        if name not in SPLITS:
            raise ValueError('Unknown split %r' % name)
        return [i for i in self.samples if i.split == name]

    def split_counts(self):
        return dict((s, len(self.split(s))) for s in SPLITS)

    def label_counts(self):
        counts = dict()
        for i in self.samples:
            counts[i.label] = counts.get(i.label, 0) + 1
        return counts

    def load(self, sample):
        """
        Read one sample file.
        :return: (ccm image, reference image)
        """
        arrays = read_tensors(os.path.join(self.directory, sample.path))
        if len(arrays) != 2:
            raise FormatError('Sample file %s should hold 2 tensors, found %r' % (sample.path, len(arrays)))
        return arrays[0], arrays[1]

    def digest(self):
        return file_digest(self.path)

    def write(self):
        lines = ['%s=%s' % (k, v) for k, v in self.meta.items()]
        lines.append(TABLE_MARKER)
        lines += [str(i) for i in self.samples]
        with open(self.path, 'w') as f:
            f.write('\n'.join(lines) + '\n')


class ManifestReader:

    def __init__(self, directory):
        if not isinstance(directory, str):
            raise AttributeError('Only a string can be used to instantiate a ManifestReader object.')
        self.directory = directory

    def parse_manifest(self):
        """
        Generator yielding ('meta', key, value) for header lines and ('sample', SampleLine) for
        table rows.
        """
        path = os.path.join(self.directory, MANIFEST_NAME)
        if not os.path.isfile(path):
            raise ConfigError('No dataset manifest found at %s' % path)
        in_table = False
        with open(path) as f:
            for line in f:
                if not line.strip():
                    continue
                if line.rstrip() == TABLE_MARKER:
                    in_table = True
                elif in_table:
                    yield 'sample', SampleLine(line)
                else:
                    if '=' not in line:
                        raise FormatError('Malformed manifest header line: %s' % line.rstrip())
                    k, v = line.rstrip('\n').split('=', 1)
                    yield 'meta', k, v

    def read(self):
        meta = dict()
        samples = []
        for rec in self.parse_manifest():
            if rec[0] == 'meta':
                meta[rec[1]] = rec[2]
            else:
                samples.append(rec[1])
        if 'extent' not in meta:
            raise FormatError('Manifest in %s has no extent' % self.directory)
        return DatasetManifest(self.directory, meta, samples)
