from ccm_utilities.errors import ConfigError


class ConfigLine:
    """ Object to represent a single key=value line of a configuration file. """

    def __init__(self, in_line, line_number):
        if '=' not in in_line:
            raise ConfigError('Line %r of the config file is not a key=value pair: %s' % (line_number, in_line))
        key, value = in_line.split('=', 1)
        self.key = key.strip().replace('-', '_')
        self.value = value.strip()
        self.line_number = line_number

        if not self.key:
            raise ConfigError('Line %r of the config file has an empty key' % line_number)

    def __str__(self):
        return '%s=%s' % (self.key, self.value)


class ConfigReader:

    def __init__(self, config_file):
        if not isinstance(config_file, str):
            raise AttributeError('Only a string can be used to instantiate a ConfigReader object.')
        self.config_file = config_file

    def parse_config(self):
        """
        Generator yielding a ConfigLine for every non-blank line. Text after '#' is a comment.
        """
        with open(self.config_file) as f:
            for n, line in enumerate(f, 1):
                line = line.split('#', 1)[0].strip()
                if line:
                    yield ConfigLine(line, n)

    def read(self):
        """ Return the file as a dict, later keys overriding earlier ones. """
        d = dict()
        for i in self.parse_config():
            d[i.key] = i.value
        return d
