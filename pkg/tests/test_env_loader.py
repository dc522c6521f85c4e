import unittest
from unittest.mock import patch
import sys
import os
import tempfile

# Add parent directory to path to import modules directly
current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
sys.path.insert(0, parent_dir)

from env_loader import load_env_file, parse_env_lines


class TestEnvLoader(unittest.TestCase):
    """Test .env loading"""

    def test_parse(self):
        text = "\n".join([
            "# training defaults",
            "RESA_EPOCHS=5",
            "export RESA_HIDDEN = \"8,8\"",
            "HOME=/elsewhere",
            "RESA_BROKEN",
            "",
        ])
        self.assertEqual(parse_env_lines(text), {"RESA_EPOCHS": "5", "RESA_HIDDEN": "8,8"})

    def test_existing_variables_win(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, ".env")
            with open(path, "w", encoding="utf-8") as f:
                f.write("RESA_EPOCHS=5\nRESA_SEED=9\n")
            with patch.dict(os.environ, {"RESA_SEED": "1"}):
                os.environ.pop("RESA_EPOCHS", None)
                applied = load_env_file(path)
                self.assertEqual(applied, {"RESA_EPOCHS": "5"})
                self.assertEqual(os.environ["RESA_EPOCHS"], "5")
                self.assertEqual(os.environ["RESA_SEED"], "1")

    def test_missing_file(self):
        self.assertEqual(load_env_file(os.path.join(tempfile.gettempdir(), "no-such-dir", ".env")), {})


if __name__ == "__main__":
    unittest.main()
