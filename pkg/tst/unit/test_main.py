"""
Unit tests for the command-line entry point.
"""
import os
import tempfile
import unittest

from main import build_parser, load_config, main


class TestCommandLine(unittest.TestCase):
    def test_commands(self):
        """Test that unknown experiments are rejected by the parser"""
        parser = build_parser()
        self.assertEqual(parser.parse_args(['selftest']).command, 'selftest')
        with self.assertRaises(SystemExit):
            parser.parse_args(['lattice'])

    def test_overrides(self):
        """Test that command-line options override the configuration file"""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'run.cfg')
            with open(path, 'w', encoding='utf-8') as handle:
                handle.write("mass = 2.0\nthreads = 2\noutput = from_file  # comment\n")
            args = build_parser().parse_args(['bounds', '--config', path, '--threads', '4', '--tolerance', '1e-6'])
            cfg = load_config(args)
        self.assertEqual(cfg.experiment, 'bounds')
        self.assertEqual(cfg.mass, 2.0)
        self.assertEqual(cfg.threads, 4)
        self.assertEqual(cfg.tolerance, 1e-6)
        self.assertEqual(cfg.output, 'from_file', "no --out given")

    def test_invalid_configuration(self):
        """Test that a missing or invalid configuration exits with status 1"""
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(main(['selftest', '--config', os.path.join(tmp, 'missing.cfg')]), 1)
            self.assertEqual(main(['selftest', '--threads', '0', '--out', tmp]), 1)


if __name__ == '__main__':
    unittest.main()
