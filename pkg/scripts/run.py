#!/usr/bin/env python3
"""
Universal runner for the tinysr-search scripts
Ensures every command runs with the skill's virtual environment
"""

import os
import sys
import subprocess
from pathlib import Path

# Emoji status lines need UTF-8 on Windows consoles
if os.name == 'nt':
    os.environ.setdefault('PYTHONIOENCODING', 'utf-8')
    try:
        sys.stdout.reconfigure(encoding='utf-8', errors='replace')
        sys.stderr.reconfigure(encoding='utf-8', errors='replace')
    except (AttributeError, OSError):
        pass

SKILL_DIR = Path(__file__).parent.parent
DEFAULT_SCRIPT = "cli.py"
SCRIPTS = {
    "cli.py": "Search, train, evaluate and replay (default)",
    "setup_environment.py": "Create or check the virtual environment",
}


def get_venv_python() -> Path:
    """Get the virtual environment Python executable"""
    venv_dir = SKILL_DIR / ".venv"
    if os.name == 'nt':
        return venv_dir / "Scripts" / "python.exe"
    return venv_dir / "bin" / "python"


def ensure_venv() -> Path:
    """Create the virtual environment on first use"""
    venv_dir = SKILL_DIR / ".venv"
    setup_script = SKILL_DIR / "scripts" / "setup_environment.py"

    if not venv_dir.exists():
        print("🔧 First-time setup: Creating virtual environment...", file=sys.stderr)
        print("   This may take a minute...", file=sys.stderr)
        env = os.environ.copy()
        env['PYTHONIOENCODING'] = 'utf-8'
        result = subprocess.run([sys.executable, str(setup_script)], env=env, stdout=sys.stderr)
        if result.returncode != 0:
            print("❌ Failed to set up environment", file=sys.stderr)
            sys.exit(1)
        print("✅ Environment ready!", file=sys.stderr)

    return get_venv_python()


def resolve_command(argv: list) -> list:
    """`run.py search-gen ...` means `run.py cli.py search-gen ...`"""
    if not argv:
        return [DEFAULT_SCRIPT]
    script_name = argv[0]
    if script_name.startswith('scripts/'):
        script_name = script_name[len('scripts/'):]
    if script_name in SCRIPTS or script_name + '.py' in SCRIPTS:
        if not script_name.endswith('.py'):
            script_name += '.py'
        return [script_name] + argv[1:]
    return [DEFAULT_SCRIPT] + argv


def main():
    """Main runner"""
    if len(sys.argv) > 1 and sys.argv[1] in ('-h', '--help'):
        print("Usage: python scripts/run.py [script] <command> [args...]", file=sys.stderr)
        print("\nAvailable scripts:", file=sys.stderr)
        for name, purpose in SCRIPTS.items():
            print(f"  {name:22s} - {purpose}", file=sys.stderr)
        print("\nExample: python scripts/run.py run --smoke", file=sys.stderr)
        sys.exit(0)

    script_name, *script_args = resolve_command(sys.argv[1:])
    script_path = SKILL_DIR / "scripts" / script_name
    if not script_path.exists():
        print(f"❌ Script not found: {script_name}", file=sys.stderr)
        print(f"   Looked for: {script_path}", file=sys.stderr)
        sys.exit(1)

    venv_python = ensure_venv()
    cmd = [str(venv_python), str(script_path)] + script_args
    env = os.environ.copy()
    env['PYTHONIOENCODING'] = 'utf-8'

    try:
        result = subprocess.run(cmd, env=env)
        sys.exit(result.returncode)
    except KeyboardInterrupt:
        print("\n⚠️ Interrupted by user", file=sys.stderr)
        sys.exit(130)
    except OSError as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        sys.exit(4)


if __name__ == "__main__":
    main()
