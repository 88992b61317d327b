from slotcon.commands.config import add_commands as add_config_commands
